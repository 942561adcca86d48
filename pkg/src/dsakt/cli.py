"""Command-line entry point: ``dsakt {gen,train,eval,predict,export-attention}``.

Settings come from an optional flat JSON file (``--config``), overridden by
command-line flags. Exit codes: 0 ok, 2 usage/config, 3 numeric failure,
4 I/O or unreadable input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import datastore as ds
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import SingleClassError, evaluate, export_attention, oracle_auc
from .model import ModelConfig, forward_batch
from .training import NonFiniteError, TrainConfig, fit

log = logging.getLogger("dsakt")

EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 2, 3, 4

DATA_FILE = "interactions.csv"
ORACLE_FILE = "oracle.txt"
CHECKPOINT_FILE = "checkpoint.dsakt"
EPOCH_LOG = "epochs.jsonl"

DEFAULTS = {
    "out": ".",
    "format": "canonical",
    # gen
    "users": 200,
    "len": 50,
    "skills": 10,
    "exercises_per_skill": 2,
    "p_init": 0.4,
    "p_learn": 0.3,
    "p_slip": 0.1,
    "p_guess": 0.2,
    # model
    "d": 24,
    "h": 4,
    "d_ff": None,
    "n_blocks": 1,
    "dropout": 0.0,
    "scale_full_d": False,
    # training
    "batch_size": 128,
    "epochs": 100,
    "warmup": 60,
    "split_ratio": 0.8,
    "val_fraction": 0.1,
    # eval / export
    "subset": "test",
    "max_windows": 100,
}


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


def _add_common(p, seed=True):
    p.add_argument("--config", help="flat JSON file with default values for any flag")
    p.add_argument("--out", help="output directory")
    if seed:
        p.add_argument("--seed", type=int)


def _add_data(p):
    p.add_argument("--data", help="interaction log path")
    p.add_argument("--format", choices=sorted(ds.FORMATS))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsakt", description="DSAKT knowledge tracing")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic BKT students")
    _add_common(g)
    g.add_argument("--users", type=int)
    g.add_argument("--len", type=int)
    g.add_argument("--skills", type=int)
    g.add_argument("--exercises-per-skill", type=int)
    for name in ("p-init", "p-learn", "p-slip", "p-guess"):
        g.add_argument(f"--{name}", type=float)

    t = sub.add_parser("train", help="split, train and checkpoint")
    _add_common(t)
    _add_data(t)
    t.add_argument("--k", type=int)
    t.add_argument("--d", type=int)
    t.add_argument("--h", type=int)
    t.add_argument("--d-ff", type=int)
    t.add_argument("--n-blocks", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--scale-full-d", action="store_true", default=None)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--split-ratio", type=float)
    t.add_argument("--val-fraction", type=float)

    e = sub.add_parser("eval", help="score a checkpoint on a data split")
    _add_common(e)
    _add_data(e)
    e.add_argument("--checkpoint")
    e.add_argument("--split-ratio", type=float)
    e.add_argument("--subset", choices=["test", "train", "all"])
    e.add_argument("--oracle", help="oracle sidecar from `gen`; adds the Bayes-oracle AUC on the same positions")

    x = sub.add_parser("export-attention", help="dump attention weights as CSV")
    _add_common(x, seed=False)
    _add_data(x)
    x.add_argument("--checkpoint")
    x.add_argument("--max-windows", type=int)

    pr = sub.add_parser("predict", help="probability of answering the next exercise correctly")
    _add_common(pr, seed=False)
    pr.add_argument("--checkpoint")
    pr.add_argument("--history", help='comma-separated "exercise_id:correct" pairs, oldest first')
    pr.add_argument("--target", help="exercise id to predict")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except OSError as err:
            raise InputError(f"cannot read config {args.config}: {err}") from None
        except json.JSONDecodeError as err:
            raise UsageError(f"config {args.config} is not valid JSON: {err}") from None
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in from_file.items()})
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "command", "verbose"):
            cfg[key] = value
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _existing(path, what):
    if not path or not os.path.exists(path):
        raise InputError(f"{what} not found: {path}")
    return path


def _out_dir(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _read_log(cfg, vocabulary=None):
    path = _existing(cfg.get("data"), "data file")
    with open(path, encoding="utf-8", newline="") as fh:
        return ds.parse_interaction_log(fh, ds.FORMATS[cfg["format"]], vocabulary=vocabulary)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg):
    _require(cfg, "seed")
    model = ds.SyntheticSkillModel.uniform(
        cfg["skills"], cfg["exercises_per_skill"],
        cfg["p_init"], cfg["p_learn"], cfg["p_slip"], cfg["p_guess"],
    )
    seqs, oracle, _ = ds.generate_synthetic(model, cfg["users"], cfg["len"], cfg["seed"])
    out = _out_dir(cfg)
    with open(os.path.join(out, DATA_FILE), "w", encoding="utf-8", newline="") as fh:
        ds.write_interaction_log(seqs, ds.synthetic_vocabulary(model), fh)
    with open(os.path.join(out, ORACLE_FILE), "w", encoding="utf-8") as fh:
        for probs in oracle:
            fh.writelines(f"{float(p)!r}\n" for p in probs)
    print(json.dumps({"users": len(seqs), "interactions": int(sum(len(s) for s in seqs))}))
    return 0


def _split(cfg, sequences):
    return ds.split_dataset(sequences, cfg["split_ratio"], cfg["seed"])


def cmd_train(cfg):
    _require(cfg, "seed", "k", "data")
    parsed = _read_log(cfg)
    train_seqs, _ = _split(cfg, parsed.sequences)
    if cfg["val_fraction"] > 0 and len(train_seqs) >= 2:
        fit_seqs, val_seqs = ds.split_dataset(train_seqs, 1 - cfg["val_fraction"], cfg["seed"] + 1)
    else:
        fit_seqs, val_seqs = train_seqs, []

    e = parsed.vocabulary.e
    mc = ModelConfig(
        e=e, k=cfg["k"], d=cfg["d"], h=cfg["h"], d_ff=cfg["d_ff"], n_blocks=cfg["n_blocks"],
        dropout_rate=cfg["dropout"], scale_full_d=bool(cfg["scale_full_d"]),
    )
    tc = TrainConfig(
        seed=cfg["seed"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
        val_fraction=cfg["val_fraction"], warmup_steps=cfg["warmup"],
    )
    out = _out_dir(cfg)
    log_path = os.path.join(out, EPOCH_LOG)
    with open(log_path, "w", encoding="utf-8") as log_fh:

        def on_epoch(report):
            print(report.to_json(timing=True), flush=True)
            # wall-clock time stays out of the file so reruns compare byte-for-byte
            log_fh.write(report.to_json(timing=False) + "\n")
            log_fh.flush()

        params, _ = fit(
            ds.window_all(fit_seqs, mc.k, e), ds.window_all(val_seqs, mc.k, e), mc, tc, on_epoch=on_epoch
        )
    save_checkpoint(params, mc, parsed.vocabulary, os.path.join(out, CHECKPOINT_FILE))
    return 0


def _load(cfg):
    path = cfg.get("checkpoint") or os.path.join(cfg["out"], CHECKPOINT_FILE)
    return load_checkpoint(_existing(path, "checkpoint"))


def cmd_eval(cfg):
    params, mc, vocab = _load(cfg)
    if cfg["subset"] != "all":
        _require(cfg, "seed")
    parsed = _read_log(cfg, vocabulary=vocab)
    seqs = parsed.sequences
    if cfg["subset"] != "all":
        train_seqs, test_seqs = _split(cfg, seqs)
        seqs = test_seqs if cfg["subset"] == "test" else train_seqs
    report = evaluate(params, mc, ds.window_all(seqs, mc.k, mc.e)).to_dict()
    if cfg.get("oracle"):
        oracle = read_oracle(_existing(cfg["oracle"], "oracle file"))
        if len(oracle) != parsed.n_rows:
            raise InputError(f"oracle file has {len(oracle)} values for {parsed.n_rows} rows")
        scores = np.concatenate([oracle[s.rows[1:]] for s in seqs])
        labels = np.concatenate([s.corrects[1:] for s in seqs])
        report["oracle_auc"] = oracle_auc(scores, labels)
    text = json.dumps(report)
    print(text)
    with open(os.path.join(_out_dir(cfg), "eval.json"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    return 0


def read_oracle(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([float(line) for line in fh if line.strip()])


def cmd_export_attention(cfg):
    params, mc, vocab = _load(cfg)
    parsed = _read_log(cfg, vocabulary=vocab)
    windows = ds.window_all(parsed.sequences, mc.k, mc.e)[: cfg["max_windows"]]
    path = os.path.join(_out_dir(cfg), "attention.csv")
    n = export_attention(params, mc, windows, path)
    print(json.dumps({"windows": len(windows), "records": n, "path": path}))
    return 0


def parse_history(text: str):
    items = []
    for chunk in (text or "").split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        ex, sep, r = chunk.rpartition(":")
        if not sep or r not in ("0", "1") or not ex:
            raise UsageError(f'bad history item {chunk!r}; expected "exercise_id:0" or "exercise_id:1"')
        items.append((ex, int(r)))
    return items


def predict_next(params, config: ModelConfig, vocabulary: ds.Vocabulary, history, target) -> float:
    """P(correct on ``target``) after ``history`` of ``(exercise_id, correct)`` pairs.

    Only the last ``k`` interactions fit in the window.
    """
    if not history:
        raise ValueError("history must contain at least one interaction")
    ids = [ex for ex, _ in history] + [target]
    unknown = sorted({ex for ex in ids if ex not in vocabulary})
    if unknown:
        raise KeyError("unknown exercise id(s): " + ", ".join(unknown))
    history = history[-config.k :]
    m = len(history)
    ex = np.array([vocabulary.index(x) for x, _ in history])
    r = np.array([c for _, c in history])
    itok = np.zeros(config.k, dtype=np.int64)
    qtok = np.zeros(config.k, dtype=np.int64)
    itok[:m] = ds.encode_interaction(ex, r, config.e)
    qtok[: m - 1] = ex[1:]
    qtok[m - 1] = vocabulary.index(target)
    probs, _, _ = forward_batch(params, config, itok[None], qtok[None])
    return float(probs[0, m - 1])


def cmd_predict(cfg):
    _require(cfg, "history", "target")
    params, mc, vocab = _load(cfg)
    history = parse_history(cfg["history"])
    if not history:
        raise UsageError("empty history")
    try:
        p = predict_next(params, mc, vocab, history, cfg["target"])
    except KeyError as err:
        raise UsageError(err.args[0]) from None
    print(json.dumps({"target": cfg["target"], "probability": p}))
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "export-attention": cmd_export_attention,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as err:
        parser.error(str(err))  # exits with status 2
    except (NonFiniteError, FloatingPointError) as err:
        print(f"dsakt: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError, ds.LogFormatError, CheckpointError) as err:
        print(f"dsakt: {err}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, SingleClassError) as err:
        print(f"dsakt: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
