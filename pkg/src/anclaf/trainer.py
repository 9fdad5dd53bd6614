"""Two-stage training with curriculum transfer and attention fine-tuning.

Stage 1 trains Generator, Discriminator, and frame Combiner jointly with
alternating adversarial updates.  Stage 2 caches conditioned latent
features (G/D frozen by default) and trains sequence Combiners over
progressively longer windows, each stage initialized from the previous
length's weights; attention models then start from the matching sequence
checkpoint with zero context columns and fine-tune.

All randomness derives from (config seed, fold, stage) streams, so a
full pipeline run is bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import attention as At
from . import layers as L
from . import metrics as M
from . import model as Mo
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, distort as distort_image, split_folds
from .errors import ConfigError, DataError, DivergenceError
from .metrics import ClassWeights, MetricReport, aggregate_report, compute_report
from .tensor import Tensor

STAGE_BASE = "base"
ALL_STAGES = ("base", "seq", "attn")


@dataclass
class TrainConfig:
    """Hyperparameters; JSON config keys mirror these field names verbatim."""

    seed: int = 7
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs_per_stage: int = 20
    curriculum: Tuple[int, ...] = (2, 4, 8, 16, 32)
    lambda_rec: float = 10.0
    lambda_q: float = 1.0
    freeze_gd_stage2: bool = True
    attention_mode: str = "concat"
    eq7_divide_by_n: bool = True
    literal_class_weights: bool = False
    saturating_generator_loss: bool = False
    hard_quadrant_onehot: bool = False
    attention_finetune_scope: str = "attention"
    latent_dim: int = 64
    hidden_size: int = 32
    folds: int = 5
    eval_batch: int = 128

    def __post_init__(self):
        self.curriculum = tuple(int(n) for n in self.curriculum)
        if not self.curriculum:
            raise ConfigError("curriculum must not be empty")
        for a, b in zip(self.curriculum, self.curriculum[1:]):
            if b <= a:
                raise ConfigError(f"curriculum must be strictly increasing, got {self.curriculum}")
            if b % a != 0:
                raise ConfigError(f"each curriculum length must divide the next, got {self.curriculum}")
        for name in ("learning_rate", "adam_beta1", "adam_beta2", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 1 or self.epochs_per_stage < 0 or self.folds < 2:
            raise ConfigError("invalid batch_size / epochs_per_stage / folds")
        if self.attention_mode not in At.MODES:
            raise ConfigError(f"unknown attention_mode '{self.attention_mode}'")
        if self.attention_finetune_scope not in ("attention", "all"):
            raise ConfigError("attention_finetune_scope must be 'attention' or 'all'")

    def arch(self) -> Mo.ArchConfig:
        return Mo.ArchConfig(
            g_dims=(256, 128, self.latent_dim),
            d_dims=(256, 64, 32),
            hidden_size=self.hidden_size,
            attention_mode=self.attention_mode,
            eq7_divide_by_n=self.eq7_divide_by_n,
            hard_quadrant_onehot=self.hard_quadrant_onehot,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["curriculum"] = list(self.curriculum)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StageResult:
    stage: str
    model_name: str
    final_train_loss: float
    initial_val_loss: float
    initial_ccc: float
    final_val_loss: float
    val_report: MetricReport
    checkpoint_path: str
    wall_seconds: float
    dropped_frames: int = 0

    def to_dict(self, include_wall: bool = False) -> dict:
        out = {
            "stage": self.stage,
            "model_name": self.model_name,
            "final_train_loss": self.final_train_loss,
            "initial_val_loss": self.initial_val_loss,
            "initial_ccc": self.initial_ccc,
            "final_val_loss": self.final_val_loss,
            "val_report": self.val_report.to_dict(),
            "checkpoint_path": self.checkpoint_path,
            "dropped_frames": self.dropped_frames,
        }
        if include_wall:
            out["wall_seconds"] = self.wall_seconds
        return out


class Adam:
    """Adaptive-moment optimizer with bias correction; in-place updates.

    ``masks`` optionally restricts updates to a 0/1 mask per parameter,
    which is how attention fine-tuning trains only the context columns of
    a shared LSTM weight matrix.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 masks: Optional[Dict[int, np.ndarray]] = None):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.array) for p in self.params]
        self.v = [np.zeros_like(p.array) for p in self.params]
        self.masks = masks or {}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, stage: str = "") -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in enumerate(self.params):
            g = p.grad_array
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(stage or "adam", "non-finite gradient")
            if k in self.masks:
                g = g * self.masks[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * (g * g)
            p.array[...] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _check_finite(value: float, stage: str) -> float:
    if not np.isfinite(value):
        raise DivergenceError(stage, f"loss value {value}")
    return value


@dataclass
class FoldSplit:
    fold: int
    train_ids: List[int]
    val_ids: List[int]


def make_folds(dataset: Dataset, k: int = 5) -> List[FoldSplit]:
    folds = split_folds(dataset.subject_ids, k=k)
    out = []
    for i, val_ids in enumerate(folds):
        train_ids = [s for s in dataset.subject_ids if s not in set(val_ids)]
        out.append(FoldSplit(fold=i, train_ids=train_ids, val_ids=val_ids))
    return out


def dataset_tag(dataset: Dataset) -> str:
    m = dataset.manifest
    return (f"seed={m['seed']},subjects={m['n_subjects']},"
            f"frames={m['frames_per_subject']},v={m['generator_version']}")


def fold_class_weights(dataset: Dataset, split: FoldSplit,
                       cfg: TrainConfig) -> ClassWeights:
    return M.class_weights(dataset.all_labels(split.train_ids),
                           literal_form=cfg.literal_class_weights)


# -- batched prediction plumbing --------------------------------------------------


def _preds_to_series(preds: List[Tensor]) -> Tuple[Tensor, Tensor]:
    """[2, B] per-step predictions -> flat (valence, arousal) series tensors.

    Ordering is step-major: index t * B + b.
    """
    pv = T.concat([T.narrow(p, 0, 0, 1) for p in preds], axis=1)
    pa = T.concat([T.narrow(p, 0, 1, 1) for p in preds], axis=1)
    width = pv.shape[1]
    return T.reshape(pv, (width,)), T.reshape(pa, (width,))


def _stack_labels_step_major(labels: np.ndarray) -> np.ndarray:
    """[B, n, 2] window labels -> [n*B, 2] aligned with _preds_to_series."""
    return labels.transpose(1, 0, 2).reshape(-1, 2)


# -- stage 1: joint adversarial training ------------------------------------------


def train_stage1(cfg: TrainConfig, dataset: Dataset, split: FoldSplit,
                 out_dir: str, log: Callable[[str], None] = print) -> Tuple[Mo.AnclafModel, StageResult]:
    t0 = time.time()
    arch = cfg.arch()
    tag = dataset_tag(dataset)
    model = Mo.build_model(arch, "frame", 1, seed=L.derive_rng(cfg.seed, "init", split.fold).integers(2**31),
                           fold=split.fold, dataset_tag=tag)
    weights = fold_class_weights(dataset, split, cfg)

    images = np.concatenate([dataset.subjects[s].images for s in split.train_ids], axis=0)
    labels = np.concatenate([dataset.subjects[s].labels for s in split.train_ids], axis=0)
    quads = np.array([Mo.quadrant_of_pair(v, a) for v, a in labels])

    g_params = [p for _, p in model.generator.parameters()]
    d_params = [p for _, p in model.discriminator.parameters()]
    c_params = [p for _, p in model.combiner.parameters()]
    all_params = g_params + d_params + c_params
    adam_g = Adam(g_params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    adam_d = Adam(d_params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    adam_c = Adam(c_params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    shuffle_rng = L.derive_rng(cfg.seed, "stage1.shuffle", split.fold)
    distort_rng = L.derive_rng(cfg.seed, "stage1.distort", split.fold)
    count = images.shape[0]
    last_loss = float("nan")

    for epoch in range(cfg.epochs_per_stage):
        order = shuffle_rng.permutation(count)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, count, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_imgs = images[idx].T  # [256, B]
            batch_quads = quads[idx]
            corrupted = np.stack([distort_image(batch_imgs[:, j], distort_rng).reshape(-1)
                                  for j in range(len(idx))], axis=1)

            T.reset_graph()
            imgs_t = Tensor(batch_imgs)

            # generator path on the corrupted inputs
            z = model.generator.encode(Tensor(corrupted))
            recon = model.generator.decode(z)

            # discriminator update: real vs detached reconstruction
            real = Mo.discriminator_forward(model.discriminator, imgs_t)
            fake_det = Mo.discriminator_forward(model.discriminator, recon.detach())
            loss_d_adv, _ = M.adversarial_losses(
                T.reshape(real.p_real, (len(idx),)),
                T.reshape(fake_det.p_real, (len(idx),)),
            )
            q_ce = T.scale(T.add(M.quadrant_cross_entropy_batch(real.q_logits, batch_quads),
                                 M.quadrant_cross_entropy_batch(fake_det.q_logits, batch_quads)),
                           0.5)
            loss_d = T.add(loss_d_adv, T.scale(q_ce, cfg.lambda_q))
            for p in all_params:
                p.zero_grad()
            T.backward(loss_d)
            adam_d.step("base")

            # generator update: fool the discriminator + reconstruct the clean image
            fake_att = Mo.discriminator_forward(model.discriminator, recon)
            _, loss_g_adv = M.adversarial_losses(
                Tensor(real.p_real.array.reshape(-1)),
                T.reshape(fake_att.p_real, (len(idx),)),
                saturating=cfg.saturating_generator_loss,
            )
            diff = T.sub(recon, imgs_t)
            rec_mse = T.tmean(T.mul(diff, diff))
            loss_g = T.add(loss_g_adv, T.scale(rec_mse, cfg.lambda_rec))
            for p in all_params:
                p.zero_grad()
            T.backward(loss_g)
            adam_g.step("base")

            # combiner update on fresh, detached conditioned features
            with T.no_grad():
                feat = Mo.extract_latent(model, imgs_t)
            zq_const = Tensor(feat.zq.array)
            hidden = model.combiner.frame_stack.forward(zq_const)
            preds = model.combiner.head.forward(hidden)
            pv, pa = _preds_to_series([preds])
            loss_c = M.affect_loss(pv, pa, labels[idx], weights)
            for p in all_params:
                p.zero_grad()
            T.backward(loss_c)
            adam_c.step("base")

            total = loss_d.item() + loss_g.item() + loss_c.item()
            _check_finite(total, "base")
            epoch_loss += total
            batches += 1
        T.reset_graph()
        last_loss = epoch_loss / max(batches, 1)
        report, _ = evaluate_frame(model, dataset, split.val_ids, cfg, weights)
        log(f"stage=base epoch={epoch} loss={last_loss:.6f} val_ccc={report.ccc_avg:.4f}")

    report, val_loss = evaluate_frame(model, dataset, split.val_ids, cfg, weights)
    path = os.path.join(out_dir, f"fold{split.fold}", "base.ckpt")
    save_checkpoint(model, path, stage="base", train_config=cfg.to_dict(),
                    rng_info={"seed": cfg.seed, "fold": split.fold, "stage": "base"})
    result = StageResult(
        stage="base", model_name=model.name, final_train_loss=last_loss,
        initial_val_loss=float("nan"), initial_ccc=float("nan"),
        final_val_loss=val_loss, val_report=report,
        checkpoint_path=path, wall_seconds=time.time() - t0)
    return model, result


def evaluate_frame(model: Mo.AnclafModel, dataset: Dataset, ids: Sequence[int],
                   cfg: TrainConfig, weights: ClassWeights) -> Tuple[MetricReport, float]:
    preds = []
    truths = []
    with T.no_grad():
        for sid in ids:
            sub = dataset.subjects[sid]
            for start in range(0, sub.images.shape[0], cfg.eval_batch):
                chunk = sub.images[start:start + cfg.eval_batch].T
                pred, _ = Mo.anclaf_forward(model, Tensor(chunk))
                preds.append(pred.array.T.copy())
            truths.append(sub.labels)
    pred_arr = np.concatenate(preds, axis=0)
    truth_arr = np.concatenate(truths, axis=0)
    report = compute_report(pred_arr, truth_arr, model.name, model.fold, None)
    return report, affect_loss_value(pred_arr, truth_arr, weights)


def affect_loss_value(pred: np.ndarray, truth: np.ndarray,
                      weights: ClassWeights) -> float:
    """Loss value on plain arrays (no graph); same formula as affect_loss."""
    total = 0.0
    for d in range(2):
        p, t = pred[:, d], truth[:, d]
        bins = M.bin_index(t)
        dim = 0.0
        for b in np.unique(bins):
            w = weights.weights[d, b]
            if w == 0.0:
                continue
            mask = bins == b
            dim += w * float(np.sqrt(np.mean((p[mask] - t[mask]) ** 2)))
        if t.var() > M.VAR_FLOOR and p.var() > M.VAR_FLOOR:
            cov = np.mean((p - p.mean()) * (t - t.mean()))
            dim += 1.0 - cov / (p.std() * t.std())
            dim += 1.0 - 2 * cov / (p.var() + t.var() + (p.mean() - t.mean()) ** 2)
            dim += 1.0 - 2 * cov / (p.var() + t.var())
        total += dim
    return total / 2.0


# -- feature extraction -------------------------------------------------------------


def extract_features(model: Mo.AnclafModel, dataset: Dataset,
                     ids: Optional[Sequence[int]] = None,
                     cache_path: Optional[str] = None) -> Dict[int, np.ndarray]:
    """Per-subject conditioned latent features [T, zq_dim] from clean frames."""
    ids = dataset.subject_ids if ids is None else list(ids)
    if cache_path and os.path.isfile(cache_path):
        loaded = np.load(cache_path)
        return {int(k): loaded[k] for k in loaded.files}
    out: Dict[int, np.ndarray] = {}
    with T.no_grad():
        for sid in ids:
            sub = dataset.subjects[sid]
            feat = Mo.extract_latent(model, Tensor(sub.images.T))
            out[sid] = feat.zq.array.T.copy()
    if cache_path:
        os.makedirs(os.path.dirname(os.path.abspath(cache_path)), exist_ok=True)
        tmp = cache_path + ".tmp.npz"
        np.savez(tmp.removesuffix(".npz"), **{str(k): v for k, v in out.items()})
        os.replace(tmp, cache_path)
    return out


# -- windows -----------------------------------------------------------------------


@dataclass
class WindowSet:
    """Non-overlapping length-n windows of same-subject frames."""

    zq: np.ndarray      # [W, n, zq_dim]
    labels: np.ndarray  # [W, n, 2]
    image_rows: Optional[np.ndarray] = None  # [W, n, 256] when G/D stay live
    dropped_frames: int = 0


def build_windows(features: Dict[int, np.ndarray], dataset: Dataset,
                  ids: Sequence[int], n: int,
                  with_images: bool = False) -> WindowSet:
    zqs, labs, imgs = [], [], []
    dropped = 0
    for sid in ids:
        sub = dataset.subjects[sid]
        feats = features[sid]
        t_total = feats.shape[0]
        usable = (t_total // n) * n
        dropped += t_total - usable
        for start in range(0, usable, n):
            zqs.append(feats[start:start + n])
            labs.append(sub.labels[start:start + n])
            if with_images:
                imgs.append(sub.images[start:start + n])
    if not zqs:
        raise DataError(f"no complete windows of length {n}")
    return WindowSet(
        zq=np.stack(zqs), labels=np.stack(labs),
        image_rows=np.stack(imgs) if with_images else None,
        dropped_frames=dropped)


def _forward_windows(combiner: Mo.CombinerNet, window_zq: np.ndarray,
                     n: int, live: Optional[Mo.AnclafModel] = None,
                     window_images: Optional[np.ndarray] = None) -> List[Tensor]:
    """[B, n, zq] -> list of [2, B] predictions; optionally through live G/D."""
    if live is not None:
        b = window_images.shape[0]
        # step-major columns (index t * B + w) keep per-step slices contiguous
        flat = window_images.transpose(1, 0, 2).reshape(n * b, -1).T
        feat = Mo.extract_latent(live, Tensor(flat))
        zq_seq = [T.narrow(feat.zq, 1, t * b, b) for t in range(n)]
    else:
        zq_seq = [Tensor(window_zq[:, t, :].T) for t in range(n)]
    if combiner.variant == "sequence":
        preds, _ = Mo.anclaf_s_forward(combiner, zq_seq, n)
    else:
        preds, _, _ = Mo.anclaf_sa_forward(combiner, zq_seq, n)
    return preds


def evaluate_windows(combiner: Mo.CombinerNet, windows: WindowSet, n: int,
                     model_name: str, fold: int, weights: ClassWeights,
                     eval_batch: int = 128) -> Tuple[MetricReport, float]:
    """Windowed evaluation with state resets (mirrors the training regime)."""
    preds_all = []
    truth_all = []
    with T.no_grad():
        for start in range(0, windows.zq.shape[0], eval_batch):
            chunk = windows.zq[start:start + eval_batch]
            labs = windows.labels[start:start + eval_batch]
            preds = _forward_windows(combiner, chunk, n)
            pv, pa = _preds_to_series(preds)
            preds_all.append(np.stack([pv.array, pa.array], axis=1))
            truth_all.append(_stack_labels_step_major(labs))
    pred_arr = np.concatenate(preds_all, axis=0)
    truth_arr = np.concatenate(truth_all, axis=0)
    report = compute_report(pred_arr, truth_arr, model_name, fold, n)
    return report, affect_loss_value(pred_arr, truth_arr, weights)


def streaming_predictions(combiner: Mo.CombinerNet, features: Dict[int, np.ndarray],
                          ids: Sequence[int], n: int) -> Dict[int, np.ndarray]:
    """Stride-1 predictions with state carried across each whole sequence.

    Same protocol as trace export: one cold start per subject, attention
    window capped at n and seeded with the zero initial combined state.
    Subjects of equal length run batched as columns.
    """
    by_len: Dict[int, List[int]] = {}
    for sid in ids:
        by_len.setdefault(features[sid].shape[0], []).append(sid)
    out: Dict[int, np.ndarray] = {}
    h = combiner.lstm.hidden_size
    with T.no_grad():
        for t_len, group in sorted(by_len.items()):
            zq_cols = np.stack([features[sid] for sid in group], axis=2)  # [T, zq, S]
            batch = len(group)
            state = L.LstmState.zeros(h, batch)
            window = At.StateWindow(n)
            if combiner.variant == "sequence_attention":
                window.push(At.combined_state(state))
            preds = np.empty((t_len, 2, batch))
            for t in range(t_len):
                zq_t = Tensor(zq_cols[t])
                if combiner.variant == "sequence":
                    y, state = combiner.lstm.step(zq_t, state)
                else:
                    aug, _ = At.attend_and_augment(
                        combiner.attention, zq_t, state, window,
                        divide_by_count=combiner.eq7_divide_by_n)
                    y, state = combiner.lstm.step(aug, state)
                    window.push(At.combined_state(state))
                preds[t] = combiner.head.forward(y).array
            for j, sid in enumerate(group):
                out[sid] = preds[:, :, j].copy()
    return out


def evaluate_streaming(combiner: Mo.CombinerNet, features: Dict[int, np.ndarray],
                       dataset: Dataset, ids: Sequence[int], n: int,
                       model_name: str, fold: int,
                       weights: ClassWeights) -> Tuple[MetricReport, float]:
    """Carried-state validation over every frame of the given subjects."""
    preds = streaming_predictions(combiner, features, ids, n)
    pred_arr = np.concatenate([preds[sid] for sid in ids], axis=0)
    truth_arr = np.concatenate([dataset.subjects[sid].labels for sid in ids], axis=0)
    report = compute_report(pred_arr, truth_arr, model_name, fold, n)
    return report, affect_loss_value(pred_arr, truth_arr, weights)


# -- stage 2: curriculum and attention ----------------------------------------------


def _attention_masks(combiner: Mo.CombinerNet, arch: Mo.ArchConfig,
                     params: Sequence[Tensor]) -> Dict[int, np.ndarray]:
    """Restrict updates to the attention pathway: scoring weights plus the
    zero-initialized context columns of the LSTM input matrix."""
    masks: Dict[int, np.ndarray] = {}
    trainable = {id(combiner.attention.w)}
    w = combiner.lstm.W
    w_mask = np.zeros_like(w.array)
    w_mask[:, :2 * arch.hidden_size] = 1.0
    for k, p in enumerate(params):
        if id(p) == id(w):
            masks[k] = w_mask
        elif id(p) not in trainable:
            masks[k] = np.zeros_like(p.array)
    return masks


def _train_combiner_stage(cfg: TrainConfig, stage_name: str, model: Mo.AnclafModel,
                          n: int, train_windows: WindowSet,
                          features: Dict[int, np.ndarray], dataset: Dataset,
                          split: FoldSplit, weights: ClassWeights, out_dir: str,
                          log: Callable[[str], None],
                          live_gd: bool = False) -> StageResult:
    t0 = time.time()
    combiner = model.combiner
    params = [p for _, p in combiner.parameters()]
    masks = None
    if combiner.variant == "sequence_attention" and cfg.attention_finetune_scope == "attention":
        masks = _attention_masks(combiner, model.arch, params)
    if live_gd:
        params += [p for _, p in model.generator.parameters()]
        params += [p for _, p in model.discriminator.parameters()]
    adam = Adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps, masks=masks)
    shuffle_rng = L.derive_rng(cfg.seed, "stage2.shuffle", model.fold, stage_name)

    init_report, init_loss = evaluate_streaming(
        combiner, features, dataset, split.val_ids, n, model.name, model.fold, weights)
    log(f"stage={stage_name} epoch=-1 loss=nan val_ccc={init_report.ccc_avg:.4f}")

    w_count = train_windows.zq.shape[0]
    last_loss = float("nan")
    for epoch in range(cfg.epochs_per_stage):
        order = shuffle_rng.permutation(w_count)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, w_count, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            T.reset_graph()
            preds = _forward_windows(
                combiner, train_windows.zq[idx], n,
                live=model if live_gd else None,
                window_images=None if not live_gd else train_windows.image_rows[idx])
            pv, pa = _preds_to_series(preds)
            truths = _stack_labels_step_major(train_windows.labels[idx])
            loss = M.affect_loss(pv, pa, truths, weights)
            adam.zero_grad()
            T.backward(loss)
            adam.step(stage_name)
            epoch_loss += _check_finite(loss.item(), stage_name)
            batches += 1
        T.reset_graph()
        last_loss = epoch_loss / max(batches, 1)
        if live_gd:
            features = extract_features(model, dataset)
        report, _ = evaluate_streaming(combiner, features, dataset, split.val_ids,
                                       n, model.name, model.fold, weights)
        log(f"stage={stage_name} epoch={epoch} loss={last_loss:.6f} "
            f"val_ccc={report.ccc_avg:.4f}")

    report, val_loss = evaluate_streaming(combiner, features, dataset, split.val_ids,
                                          n, model.name, model.fold, weights)
    path = os.path.join(out_dir, f"fold{model.fold}", f"{stage_name}.ckpt")
    save_checkpoint(model, path, stage=stage_name, train_config=cfg.to_dict(),
                    rng_info={"seed": cfg.seed, "fold": model.fold, "stage": stage_name})
    return StageResult(
        stage=stage_name, model_name=model.name, final_train_loss=last_loss,
        initial_val_loss=init_loss, initial_ccc=init_report.ccc_avg,
        final_val_loss=val_loss, val_report=report,
        checkpoint_path=path, wall_seconds=time.time() - t0,
        dropped_frames=train_windows.dropped_frames)


def combiner_init_seed(cfg: TrainConfig, fold: int) -> int:
    """Seed used for fresh sequence-combiner initialization on a fold."""
    return int(L.derive_rng(cfg.seed, "s-init", fold).integers(2**31))


def train_curriculum(cfg: TrainConfig, base_model: Mo.AnclafModel,
                     features: Dict[int, np.ndarray], dataset: Dataset,
                     split: FoldSplit, out_dir: str,
                     log: Callable[[str], None] = print) -> List[StageResult]:
    weights = fold_class_weights(dataset, split, cfg)
    live = not cfg.freeze_gd_stage2
    results = []
    prev: Optional[Mo.AnclafModel] = None
    for n in cfg.curriculum:
        seed = combiner_init_seed(cfg, split.fold)
        model = Mo.AnclafModel(
            arch=base_model.arch, generator=base_model.generator,
            discriminator=base_model.discriminator,
            combiner=Mo.build_combiner(base_model.arch, "sequence", n, seed),
            fold=split.fold, dataset_tag=base_model.dataset_tag)
        if prev is not None:
            _copy_combiner(prev.combiner, model.combiner)
        train_w = build_windows(features, dataset, split.train_ids, n, with_images=live)
        results.append(_train_combiner_stage(
            cfg, f"s-{n}", model, n, train_w, features, dataset, split, weights,
            out_dir, log, live_gd=live))
        prev = model
    return results


def _copy_combiner(src: Mo.CombinerNet, dst: Mo.CombinerNet) -> None:
    src_named = dict(src.parameters())
    for name, p in dst.parameters():
        p.array[...] = src_named[name].array


def train_attention(cfg: TrainConfig, features: Dict[int, np.ndarray],
                    dataset: Dataset, split: FoldSplit,
                    s_checkpoints: Dict[int, str], out_dir: str,
                    log: Callable[[str], None] = print) -> List[StageResult]:
    from .checkpoint import load_sequence_as_attention

    weights = fold_class_weights(dataset, split, cfg)
    live = not cfg.freeze_gd_stage2
    results = []
    for n in cfg.curriculum:
        if n not in s_checkpoints:
            raise DataError(f"missing ANCLaF-S-{n} checkpoint for attention stage")
        seed = int(L.derive_rng(cfg.seed, "sa-init", split.fold, n).integers(2**31))
        model, _ = load_sequence_as_attention(s_checkpoints[n], seed=seed)
        train_w = build_windows(features, dataset, split.train_ids, n, with_images=live)
        results.append(_train_combiner_stage(
            cfg, f"sa-{n}", model, n, train_w, features, dataset, split, weights,
            out_dir, log, live_gd=live))
    return results


# -- cross validation ----------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    stages: List[StageResult]

    def stage(self, name: str) -> StageResult:
        for s in self.stages:
            if s.stage == name:
                return s
        raise KeyError(name)


def run_fold(cfg: TrainConfig, dataset: Dataset, split: FoldSplit, out_dir: str,
             stages: Sequence[str] = ALL_STAGES,
             log: Callable[[str], None] = print) -> FoldResult:
    results: List[StageResult] = []
    base_path = os.path.join(out_dir, f"fold{split.fold}", "base.ckpt")
    model: Optional[Mo.AnclafModel] = None
    if "base" in stages:
        model, base_res = train_stage1(cfg, dataset, split, out_dir, log)
        results.append(base_res)
    if "seq" in stages or "attn" in stages:
        if model is None:
            model, _ = load_checkpoint(base_path)
        cache = os.path.join(out_dir, f"fold{split.fold}", "features.npz")
        features = extract_features(model, dataset, cache_path=cache)
        if "seq" in stages:
            results.extend(train_curriculum(cfg, model, features, dataset, split,
                                            out_dir, log))
        if "attn" in stages:
            s_ckpts = {n: os.path.join(out_dir, f"fold{split.fold}", f"s-{n}.ckpt")
                       for n in cfg.curriculum}
            results.extend(train_attention(cfg, features, dataset, split, s_ckpts,
                                           out_dir, log))
    return FoldResult(fold=split.fold, stages=results)


def _run_fold_job(args) -> dict:
    cfg_dict, data_dir, fold_index, out_dir, stages = args
    from .data import load_dataset

    cfg = TrainConfig.from_dict(cfg_dict)
    dataset = load_dataset(data_dir)
    split = make_folds(dataset, cfg.folds)[fold_index]
    result = run_fold(cfg, dataset, split, out_dir, stages)
    return _fold_result_to_dict(result)


def _fold_result_to_dict(r: FoldResult) -> dict:
    return {"fold": r.fold, "stages": [s.to_dict(include_wall=True) for s in r.stages]}


def _fold_result_from_dict(d: dict) -> FoldResult:
    stages = []
    for s in d["stages"]:
        stages.append(StageResult(
            stage=s["stage"], model_name=s["model_name"],
            final_train_loss=s["final_train_loss"],
            initial_val_loss=s["initial_val_loss"],
            initial_ccc=s.get("initial_ccc", float("nan")),
            final_val_loss=s["final_val_loss"],
            val_report=MetricReport.from_dict(s["val_report"]),
            checkpoint_path=s["checkpoint_path"],
            wall_seconds=s.get("wall_seconds", 0.0),
            dropped_frames=s.get("dropped_frames", 0)))
    return FoldResult(fold=d["fold"], stages=stages)


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("ANCLAF_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


@dataclass
class CrossValResult:
    folds: List[FoldResult]
    aggregated: Dict[str, MetricReport]


def run_cross_validation(cfg: TrainConfig, data_dir: str, out_dir: str,
                         stages: Sequence[str] = ALL_STAGES,
                         log: Callable[[str], None] = print,
                         parallel: bool = True) -> CrossValResult:
    from .data import load_dataset

    dataset = load_dataset(data_dir)
    if len(dataset.subject_ids) < cfg.folds:
        raise DataError(f"cross validation needs >= {cfg.folds} subjects, "
                        f"got {len(dataset.subject_ids)}")
    splits = make_folds(dataset, cfg.folds)
    jobs = [(cfg.to_dict(), data_dir, s.fold, out_dir, tuple(stages)) for s in splits]
    workers = worker_count(len(jobs)) if parallel else 1
    fold_results: List[FoldResult] = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            for d in pool.map(_run_fold_job, jobs):
                fold_results.append(_fold_result_from_dict(d))
    else:
        for job in jobs:
            fold_results.append(_fold_result_from_dict(_run_fold_job(job)))
    fold_results.sort(key=lambda r: r.fold)

    by_model: Dict[str, List[MetricReport]] = {}
    for fr in fold_results:
        for s in fr.stages:
            by_model.setdefault(s.model_name, []).append(s.val_report)
    aggregated = {name: aggregate_report(reports) for name, reports in by_model.items()}
    _write_summary(out_dir, fold_results, aggregated)
    return CrossValResult(folds=fold_results, aggregated=aggregated)


def _write_summary(out_dir: str, folds: List[FoldResult],
                   aggregated: Dict[str, MetricReport]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "folds": [{"fold": f.fold,
                   "stages": [s.to_dict(include_wall=False) for s in f.stages]}
                  for f in folds],
        "aggregated": {k: v.to_dict() for k, v in sorted(aggregated.items())},
    }
    blob = json.dumps(payload, indent=2, sort_keys=True).encode()
    tmp = os.path.join(out_dir, "summary.json.tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, os.path.join(out_dir, "summary.json"))
