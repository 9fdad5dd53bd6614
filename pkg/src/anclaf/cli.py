"""Command-line surface: gen-data, train, eval, trace.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.  All
file outputs are deterministic functions of their inputs (atomic writes,
no timestamps), so re-running a command reproduces identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import attention as At
from . import layers as L
from . import model as Mo
from . import tensor as T
from . import trainer as Tr
from .checkpoint import load_checkpoint
from .data import Dataset, gen_dataset, load_dataset, quadrant_of_pair, save_dataset
from .errors import AnclafError, ConfigError, DataError
from .metrics import MetricReport
from .tensor import Tensor

TRACE_BASE_FIELDS = ("subject_id", "frame_index", "v_true", "a_true",
                     "v_pred", "a_pred", "quadrant_true", "quadrant_pred")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _atomic_write_text(path: str, text: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


# -- gen-data -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    records, manifest = gen_dataset(args.subjects, args.frames, args.seed,
                                    smoothness=args.smoothness,
                                    obs_noise=args.obs_noise)
    save_dataset(records, manifest, args.out)
    print(f"dataset: subjects={manifest['n_subjects']} "
          f"frames_per_subject={manifest['frames_per_subject']} "
          f"seed={manifest['seed']} out={args.out}")
    return 0


# -- train --------------------------------------------------------------------------


def load_config(path: Optional[str]) -> Tr.TrainConfig:
    if path is None:
        return Tr.TrainConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path} at line {e.lineno}: {e.msg}") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    return Tr.TrainConfig.from_dict(payload)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    stages = ("base", "seq", "attn") if args.stage == "all" else (args.stage,)
    result = Tr.run_cross_validation(cfg, args.data, args.out, stages=stages)
    total = sum(len(f.stages) for f in result.folds)
    print(f"trained folds={len(result.folds)} checkpoints={total} out={args.out}")
    return 0


# -- eval ---------------------------------------------------------------------------


def evaluate_checkpoint(ckpt_path: str, data_dir: str) -> MetricReport:
    model, header = load_checkpoint(ckpt_path)
    dataset = load_dataset(data_dir)
    cfg = Tr.TrainConfig.from_dict(header["train_config"]) if header.get("train_config") \
        else Tr.TrainConfig()
    tag = Tr.dataset_tag(dataset)
    if model.dataset_tag and model.dataset_tag != tag:
        print(f"warning: dataset tag mismatch (checkpoint '{model.dataset_tag}', "
              f"data '{tag}')", file=sys.stderr)
    split = Tr.make_folds(dataset, cfg.folds)[model.fold]
    weights = Tr.fold_class_weights(dataset, split, cfg)
    if model.combiner.variant == "frame":
        report, _ = Tr.evaluate_frame(model, dataset, split.val_ids, cfg, weights)
    else:
        features = Tr.extract_features(model, dataset, ids=split.val_ids)
        report, _ = Tr.evaluate_streaming(model.combiner, features, dataset,
                                          split.val_ids, model.combiner.n,
                                          model.name, model.fold, weights)
    return report

def cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.checkpoint, args.data)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    _atomic_write_text(args.report, payload)
    print(f"report: model={report.model} fold={report.fold} "
          f"ccc_avg={report.ccc_avg:.4f} -> {args.report}")
    return 0


# -- trace --------------------------------------------------------------------------


def trace_subject(model: Mo.AnclafModel, dataset: Dataset,
                  subject_id: int) -> Tuple[List[str], List[List[str]]]:
    """Stride-1 rows over the full subject sequence.

    Sequence variants carry LSTM state across the whole sequence; the
    attention window is capped at the model's n and is seeded with the
    zero initial state so every row carries a full weight distribution.
    """
    if subject_id not in dataset.subjects:
        raise DataError(f"unknown subject {subject_id}")
    sub = dataset.subjects[subject_id]
    n = model.combiner.n
    variant = model.combiner.variant
    fields = list(TRACE_BASE_FIELDS)
    if variant == "sequence_attention":
        fields += [f"att_w_{j + 1}" for j in range(n)]

    preds: List[np.ndarray] = []
    att_rows: List[np.ndarray] = []
    with T.no_grad():
        if variant == "frame":
            for start in range(0, sub.images.shape[0], 256):
                chunk = sub.images[start:start + 256].T
                out, _ = Mo.anclaf_forward(model, Tensor(chunk))
                preds.extend(out.array.T)
        else:
            feat = Mo.extract_latent(model, Tensor(sub.images.T))
            zq_all = feat.zq.array  # [zq_dim, T]
            state = L.LstmState.zeros(model.combiner.lstm.hidden_size)
            window = At.StateWindow(n)
            if variant == "sequence_attention":
                window.push(At.combined_state(state))
            for t in range(zq_all.shape[1]):
                zq_t = Tensor(zq_all[:, t])
                if variant == "sequence":
                    y, state = model.combiner.lstm.step(zq_t, state)
                else:
                    aug, w = At.attend_and_augment(
                        model.combiner.attention, zq_t, state, window,
                        divide_by_count=model.combiner.eq7_divide_by_n)
                    y, state = model.combiner.lstm.step(aug, state)
                    window.push(At.combined_state(state))
                    padded = np.zeros(n)
                    wv = w.array.reshape(-1)
                    padded[:wv.size] = wv
                    att_rows.append(padded)
                preds.append(model.combiner.head.forward(y).array.copy())

    rows = []
    for t, p in enumerate(preds):
        v_true, a_true = sub.labels[t]
        row = [str(subject_id), str(t), _fmt(v_true), _fmt(a_true),
               _fmt(p[0]), _fmt(p[1]),
               str(quadrant_of_pair(v_true, a_true)),
               str(quadrant_of_pair(p[0], p[1]))]
        if variant == "sequence_attention":
            row += [_fmt(x) for x in att_rows[t]]
        rows.append(row)
    return fields, rows


def cmd_trace(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    fields, rows = trace_subject(model, dataset, args.subject)
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    writer.writerows(rows)
    _atomic_write_text(args.out, buf.getvalue())
    print(f"trace: subject={args.subject} rows={len(rows)} -> {args.out}")
    return 0


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anclaf",
                                     description="Affect estimation models on the "
                                                 "synthetic parametric-face benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--smoothness", type=float, default=1.0)
    p.add_argument("--obs-noise", dest="obs_noise", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run the training pipeline over all folds")
    p.add_argument("--config", default=None, help="JSON config (TrainConfig keys)")
    p.add_argument("--data", required=True)
    p.add_argument("--stage", choices=("base", "seq", "attn", "all"), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its validation fold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("trace", help="export per-frame predictions as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_trace)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except AnclafError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
