"""``mupod`` command line: generate, preprocess, pretrain, train, search, evaluate, explain, replay.

Every command writes its artifacts plus one ``manifest.json`` next to them.
The manifest records the argv, resolved options, seed and sha256 of every
input and output, so ``mupod replay <manifest>`` can rerun the command and
check that the hashes come out the same.

Options come from three layers, later ones winning: built-in defaults, the
``--config`` JSON file (keys are option names with ``_``), explicit flags.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    FORMAT,
    Dataset,
    IngestionError,
    build_matrix,
    filter_min_entries,
    read_claims_csv,
    read_enrollees_csv,
    split_dataset,
    Vocabulary,
)
from .encoder import EncoderConfig
from .evaluation import confusion_metrics, imbalanced_eval, metrics_csv, pretty_table
from .explain import aggregate_attention, export_dot, graphs_to_json
from .models import ConcatLstmModel, MupodModel, SingleTransformerModel, forward, load_model
from .representation import DivergenceError, LstmParams, PretrainConfig, pretrain_encoder
from .synthetic import GeneratorConfig, generate_dataset
from .training import SearchGrid, TrainConfig, random_search, train

log = logging.getLogger("mupod")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
MODEL_NAMES = ("mupod", "concat-lstm", "single-transformer")


class UsageError(Exception):
    """Bad options, inputs or configs; maps to exit code 2."""


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# ------------------------------------------------------------- options
# name -> (default, type, help); every entry becomes --name-with-dashes

GENERATE = {
    "n_patients": (2000, int, "patients to generate"),
    "n_months": (24, int, "months per patient"),
    "med_vocab_size": (20, int, "medication vocabulary size"),
    "diag_vocab_size": (20, int, "diagnosis vocabulary size"),
    "base_rate": (0.05, float, "background event rate per token and month"),
    "strength": (0.8, float, "cross-signal strength s in [0, 1]"),
    "rule": ("cross-stream", str, "cross-stream or single-stream"),
    "lag": (2, int, "lag window k in months"),
    "pairs": (3, int, "planted medication/diagnosis pairs per patient"),
    "fractions": ("0.8,0.1,0.1", str, "train,val,test fractions"),
}
PREPROCESS = {
    "min_entries": (3, int, "drop patients with fewer non-empty months"),
    "window": ("0,120", str, "first,last+1 month index kept"),
    "fractions": ("0.8,0.1,0.1", str, "train,val,test fractions"),
}
PRETRAIN = {
    "stream": ("med", str, "med or diag"),
    "hidden_dim": (10, int, "LSTM width"),
    "lr": (1e-2, float, "learning rate"),
    "batch_size": (64, int, "minibatch size"),
    "iterations": (300, int, "optimizer steps"),
    "l2": (1e-6, float, "L2 coefficient"),
    "eval_every": (50, int, "validation interval"),
    "optimizer": ("adam", str, "adam or sgd"),
}
TRAIN = {
    "model": ("mupod", str, "mupod, concat-lstm or single-transformer"),
    "lr": (1e-2, float, "learning rate"),
    "batch_size": (64, int, "minibatch size"),
    "iterations": (1000, int, "optimizer steps"),
    "l2": (1e-6, float, "L2 coefficient"),
    "eval_every": (50, int, "validation interval"),
    "optimizer": ("adam", str, "adam or sgd"),
    "med_encoder": (None, str, "pretrained medication encoder (mupod); pretrained on the fly if absent"),
    "diag_encoder": (None, str, "pretrained diagnosis encoder (mupod)"),
    "pretrain_iterations": (300, int, "pretraining steps when encoders are not given"),
    "finetune": (False, bool, "update the LSTM encoders too (mupod)"),
    "n_layers": (2, int, "encoder layers"),
    "heads": (1, int, "attention heads"),
    "causal": (False, bool, "mask attention to earlier months"),
    "residual": (False, bool, "add each stream back after reconstruction"),
    "pooling": ("mean", str, "mean or last"),
    "hidden_dim": (32, int, "concat-lstm width"),
}
SEARCH = {
    **{k: v for k, v in TRAIN.items() if k not in ("lr", "batch_size", "iterations", "l2")},
    "trials": (10, int, "configurations to sample"),
    "desk_factor": (100, int, "divide the iteration grid by this"),
}
EVALUATE = {
    "split": ("test", str, "train, val or test"),
    "threshold": (0.5, float, "decision threshold"),
    "ratios": (None, str, "positive:negative ratios, e.g. 0.5,0.2,0.1"),
    "repeats": (5, int, "subsamples per ratio"),
}
EXPLAIN = {
    "patient": (None, str, "comma-separated patient ids"),
    "n": (10, int, "explain the first n test patients when --patient is absent"),
    "layer": (0, int, "attention layer"),
}


def _add_options(p: argparse.ArgumentParser, table: dict) -> None:
    for name, (default, typ, text) in table.items():
        flag = "--" + name.replace("_", "-")
        if typ is bool:
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None, help=f"{text} (default {default})")
        else:
            p.add_argument(flag, type=typ, default=None, help=f"{text} (default {default})")


def _resolve(args: argparse.Namespace, table: dict) -> dict:
    """defaults < config file < flags."""
    cfg = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        raw = raw.get(args.command, raw)
        cfg = {k.replace("-", "_"): v for k, v in raw.items() if k != "seed"}
        unknown = set(cfg) - set(table)
        if unknown:
            raise UsageError(f"{args.config}: unknown options for {args.command}: {sorted(unknown)}")
    out = {}
    for name, (default, _, _) in table.items():
        flag = getattr(args, name, None)
        out[name] = flag if flag is not None else cfg.get(name, default)
    return out


# ------------------------------------------------------------ manifest


def write_manifest(
    out_dir: Path, args: argparse.Namespace, options: dict, inputs: list[Path], outputs: list[Path], started: float
) -> Path:
    manifest = {
        "format": FORMAT,
        "version": __version__,
        "command": args.command,
        "argv": args.argv,
        "seed": args.seed,
        "options": options,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
        "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _data_files(d: Path) -> tuple[list[Path], list[Path], dict]:
    return sorted(p for p in d.iterdir() if p.suffix in (".jsonl", ".json") and p.name != "manifest.json")


def _out_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_dataset(path) -> Dataset:
    d = Path(path)
    if not (d / "patients.jsonl").exists():
        raise UsageError(f"{d} is not a dataset directory (no patients.jsonl)")
    return Dataset.load(d)


def _split(data: Dataset, name: str):
    if name not in data.splits:
        raise UsageError(f"dataset has no split {name!r}; available: {sorted(data.splits)}")
    return data.part(name)


# ------------------------------------------------------------ commands


def cmd_generate(args) -> tuple[list[Path], list[Path], dict]:
    opts = _resolve(args, GENERATE)
    fractions = _floats(opts.pop("fractions"))
    cfg = GeneratorConfig.from_dict({**opts, "seed": args.seed})
    data = generate_dataset(cfg, fractions)
    out = _out_dir(args.out)
    files = data.save(out)
    log.info("generated %d patients (%d positive) into %s", len(data.matrix), int(data.matrix.labels.sum()), out)
    return [], files, {**opts, "fractions": fractions}


def cmd_preprocess(args) -> tuple[list[Path], list[Path], dict]:
    opts = _resolve(args, PREPROCESS)
    window = tuple(int(x) for x in _floats(opts["window"]))
    if len(window) != 2 or window[0] >= window[1]:
        raise UsageError(f"--window needs first,last+1 with first < last+1, got {opts['window']}")
    fractions = _floats(opts["fractions"])
    vocab = Vocabulary.load(args.vocab)
    enrollees = read_enrollees_csv(args.enrollees)
    matrix, report = build_matrix(read_claims_csv(args.claims), vocab, enrollees, window)
    kept = filter_min_entries(matrix, opts["min_entries"])
    log.info("%s; dropped %d patients below %d active months", report.summary(), kept.dropped, opts["min_entries"])
    if len(kept) == 0:
        log.warning("no patient has %d or more active months; writing an empty dataset", opts["min_entries"])
        splits = {"train": [], "val": [], "test": []}
    else:
        tr, va, te = split_dataset(kept, fractions, args.seed)
        splits = {"train": tr, "val": va, "test": te}
    out = _out_dir(args.out)
    files = Dataset(kept, vocab, splits).save(out)
    return [Path(args.claims), Path(args.enrollees), Path(args.vocab)], files, {**opts, "dropped": kept.dropped}


def cmd_pretrain(args) -> tuple[list[Path], list[Path], dict]:
    opts = _resolve(args, PRETRAIN)
    if opts["stream"] not in ("med", "diag"):
        raise UsageError("--stream must be med or diag")
    data = _load_dataset(args.data)
    cfg = PretrainConfig(**{k: v for k, v in opts.items() if k != "stream"}, seed=args.seed)
    enc, history = pretrain_encoder(data.part("train"), data.part("val"), opts["stream"], cfg)
    out = _out_dir(args.out)
    path = out / f"encoder_{opts['stream']}.json"
    enc.save(path)
    logp = out / f"pretrain_{opts['stream']}.json"
    logp.write_text(json.dumps({"format": FORMAT, "log": history}, indent=1) + "\n")
    return _data_files(Path(args.data)), [path, logp], opts


def _encoder_config(opts: dict, stream_dim: int, d_k: int, names=("M", "D")) -> EncoderConfig:
    return EncoderConfig(
        stream_names=names,
        stream_dim=stream_dim,
        d_k=d_k,
        n_layers=opts["n_layers"],
        heads=opts["heads"],
        causal=opts["causal"],
        pooling=opts["pooling"],
        residual=opts["residual"],
    )


def _model_factory(opts: dict, data: Dataset, seed: int):
    """Returns (make_model, extra inputs). MUPOD encoders are loaded or pretrained once and copied per model."""
    kind = opts["model"]
    m = data.matrix
    n_in = m.med_vocab_size + m.diag_vocab_size + len(m.patients[0].demo) if len(m) else 0
    if kind == "mupod":
        extra = []
        encoders = []
        for stream, key, width in (("med", "med_encoder", m.med_vocab_size), ("diag", "diag_encoder", m.diag_vocab_size)):
            if opts[key]:
                enc = LstmParams.load(opts[key])
                extra.append(Path(opts[key]))
                if enc.input_dim != width:
                    raise UsageError(f"{opts[key]}: encoder input_dim {enc.input_dim} != {stream} vocabulary {width}")
            else:
                cfg = PretrainConfig(iterations=opts["pretrain_iterations"], seed=seed + len(encoders))
                enc, _ = pretrain_encoder(data.part("train"), data.part("val"), stream, cfg)
            encoders.append(enc)
        if encoders[0].hidden_dim != encoders[1].hidden_dim:
            raise UsageError("medication and diagnosis encoders differ in hidden_dim")
        h = encoders[0].hidden_dim
        ecfg = _encoder_config(opts, h, h)
        return (lambda: MupodModel(encoders[0].copy(), encoders[1].copy(), ecfg, seed, opts["finetune"])), extra
    if kind == "concat-lstm":
        return (lambda: ConcatLstmModel(n_in, opts["hidden_dim"], seed)), []
    if kind == "single-transformer":
        ecfg = _encoder_config(opts, 20, 20, names=("X",))
        return (lambda: SingleTransformerModel(n_in, ecfg, seed)), []
    raise UsageError(f"--model must be one of {MODEL_NAMES}")


def cmd_train(args) -> tuple[list[Path], list[Path], dict]:
    opts = _resolve(args, TRAIN)
    data = _load_dataset(args.data)
    make_model, extra = _model_factory(opts, data, args.seed)
    tcfg = TrainConfig(
        lr=opts["lr"],
        batch_size=opts["batch_size"],
        iterations=opts["iterations"],
        l2=opts["l2"],
        seed=args.seed,
        optimizer=opts["optimizer"],
        eval_every=opts["eval_every"],
    )
    res = train(make_model(), data.part("train"), data.part("val"), tcfg)
    out = _out_dir(args.out)
    ckpt, logp, metp = out / "model.json", out / "train_log.csv", out / "metrics.csv"
    res.model.save(ckpt)
    logp.write_text(res.log_csv())
    rows = []
    for split in ("val", "test"):
        part = data.part(split)
        if len(part):
            rep = confusion_metrics(res.model.predict_proba(part.patients), part.labels)
            rows.append({"model": f"{opts['model']}:{split}", "ratio": "", **rep.as_dict()})
    metp.write_text(metrics_csv(rows))
    print(pretty_table(rows))
    return _data_files(Path(args.data)) + extra, [ckpt, logp, metp], opts


def cmd_search(args) -> tuple[list[Path], list[Path], dict]:
    opts = _resolve(args, SEARCH)
    data = _load_dataset(args.data)
    opts_full = {**opts, "lr": None, "batch_size": None, "iterations": None, "l2": None}
    make_model, extra = _model_factory(opts_full, data, args.seed)
    grid = SearchGrid(desk_factor=opts["desk_factor"])
    base = TrainConfig(seed=args.seed, optimizer=opts["optimizer"], eval_every=opts["eval_every"])
    best, board, model = random_search(
        make_model, data.part("train"), data.part("val"), grid, opts["trials"], args.seed, base
    )
    out = _out_dir(args.out)
    ckpt, boardp = out / "model.json", out / "leaderboard.json"
    model.save(ckpt)
    boardp.write_text(json.dumps({"format": FORMAT, "best": asdict(best), "leaderboard": board}, indent=1) + "\n")
    for row in board:
        print(f"trial {row['trial']:>3}  val_auc {row['val_auc']:.4f}  {row['config']}")
    return _data_files(Path(args.data)) + extra, [ckpt, boardp], opts


def _check_compatible(model, data: Dataset, path) -> None:
    m = data.matrix
    man = model.manifest()
    if isinstance(model, MupodModel):
        want = {"med_input_dim": m.med_vocab_size, "diag_input_dim": m.diag_vocab_size}
    else:
        want = {"input_dim": m.med_vocab_size + m.diag_vocab_size + (len(m.patients[0].demo) if len(m) else 0)}
    bad = {k: (man[k], v) for k, v in want.items() if man[k] != v}
    if bad:
        detail = ", ".join(f"{k}: checkpoint {a} vs data {b}" for k, (a, b) in bad.items())
        raise UsageError(f"{path} does not fit the dataset: {detail}")


def _load_checkpoint(path):
    try:
        return load_model(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None


def cmd_evaluate(args) -> tuple[list[Path], list[Path], dict]:
    opts = _resolve(args, EVALUATE)
    data = _load_dataset(args.data)
    model = _load_checkpoint(args.checkpoint)
    _check_compatible(model, data, args.checkpoint)
    part = _split(data, opts["split"])
    if len(part) == 0:
        raise UsageError(f"split {opts['split']!r} is empty")
    scores = model.predict_proba(part.patients)
    name = model.kind
    if opts["ratios"]:
        ratios = _floats(opts["ratios"])
        try:
            reps = imbalanced_eval(scores, part.labels, ratios, opts["repeats"], args.seed, opts["threshold"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows = [
            {"model": name, "ratio": r.ratio, "accuracy": "", "precision": r.precision, "recall": r.recall, "f1": r.f1, "auc": r.auc}
            for r in reps
        ]
    else:
        rows = [{"model": name, "ratio": "", **confusion_metrics(scores, part.labels, opts["threshold"]).as_dict()}]
    out = _out_dir(args.out)
    path = out / "metrics.csv"
    path.write_text(metrics_csv(rows))
    print(pretty_table(rows))
    return _data_files(Path(args.data)) + [Path(args.checkpoint)], [path], opts


def cmd_explain(args) -> tuple[list[Path], list[Path], dict]:
    opts = _resolve(args, EXPLAIN)
    data = _load_dataset(args.data)
    model = _load_checkpoint(args.checkpoint)
    if not isinstance(model, MupodModel):
        raise UsageError(f"explain needs a mupod checkpoint, got {model.kind}")
    _check_compatible(model, data, args.checkpoint)
    if opts["patient"]:
        raw = opts["patient"]
        ids = [x for x in (raw if isinstance(raw, list) else str(raw).split(",")) if x]
    else:
        ids = _split(data, "test").ids[: opts["n"]]
    known = set(data.matrix.ids)
    missing = [i for i in ids if i not in known]
    if missing:
        raise UsageError(f"unknown patient ids: {missing}")
    if opts["layer"] >= model.config.n_layers:
        raise UsageError(f"--layer {opts['layer']} but the model has {model.config.n_layers} layers")
    graphs = []
    for pid in ids:
        p = data.matrix[pid]
        _, trace = forward(p, model)
        graphs.append(aggregate_attention(trace, p, opts["layer"], "MD", data.vocab.med_names(), data.vocab.diag_names()))
    out = _out_dir(args.out)
    dot, js = out / "attention.dot", out / "attention.json"
    dot.write_text(export_dot(graphs))
    js.write_text(graphs_to_json(graphs))
    return _data_files(Path(args.data)) + [Path(args.checkpoint)], [dot, js], {**opts, "patient": ids}


def cmd_replay(args) -> int:
    """Rerun a manifest's argv and compare every output hash."""
    man = json.loads(Path(args.manifest).read_text())
    if man.get("format") != FORMAT or "argv" not in man:
        raise UsageError(f"{args.manifest} is not a mupod manifest")
    want = dict(man["outputs"])
    code = main(man["argv"])
    if code != EXIT_OK:
        return code
    bad = [p for p, h in want.items() if not Path(p).exists() or sha256(p) != h]
    for p in sorted(want):
        print(f"{'MISMATCH' if p in bad else 'ok':>8}  {p}")
    if bad:
        log.error("%d of %d artifacts differ from %s", len(bad), len(want), args.manifest)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "generate": (cmd_generate, GENERATE, "synthetic cohort -> dataset directory"),
    "preprocess": (cmd_preprocess, PREPROCESS, "claims CSV -> dataset directory"),
    "pretrain": (cmd_pretrain, PRETRAIN, "pretrain one LSTM stream encoder"),
    "train": (cmd_train, TRAIN, "train a model, save checkpoint and metrics"),
    "search": (cmd_search, SEARCH, "random hyperparameter search"),
    "evaluate": (cmd_evaluate, EVALUATE, "metrics for a checkpoint, optionally at several class ratios"),
    "explain": (cmd_explain, EXPLAIN, "attention graphs as DOT and JSON"),
}
REQUIRED = {
    "generate": (),
    "preprocess": ("claims", "enrollees", "vocab"),
    "pretrain": ("data",),
    "train": ("data",),
    "search": ("data",),
    "evaluate": ("data", "checkpoint"),
    "explain": ("data", "checkpoint"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mupod", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"mupod {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, table, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
        p.add_argument("--config", help="JSON options file; a top-level key per command is also accepted")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        for req in REQUIRED[name]:
            p.add_argument("--" + req, required=True)
        _add_options(p, table)
    r = sub.add_parser("replay", help="rerun a manifest and compare artifact hashes")
    r.add_argument("manifest")
    r.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.command == "replay":
            return cmd_replay(args)
        args.argv = argv
        started = time.time()
        inputs, outputs, options = COMMANDS[args.command][0](_with_seed(args))
        write_manifest(Path(args.out), args, options, inputs, outputs, started)
        return EXIT_OK
    except (UsageError, IngestionError) as exc:
        print(f"mupod: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"mupod: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"mupod: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, OSError, np.linalg.LinAlgError) as exc:
        print(f"mupod: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # unexpected: keep the traceback in verbose mode
        log.debug("unhandled error", exc_info=True)
        print(f"mupod: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _with_seed(args: argparse.Namespace) -> argparse.Namespace:
    """Fill ``args.seed`` from the config file when no flag was given, else 0."""
    if args.seed is None and args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON: {exc}") from None
        if isinstance(raw, dict) and "seed" in raw:
            args.seed = int(raw["seed"])
    if args.seed is None:
        args.seed = 0
    return args


if __name__ == "__main__":
    sys.exit(main())
