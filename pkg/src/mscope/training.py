"""Training orchestration: crop augmentation, balanced epoch subsampling,
the 3-way assessment pretraining task, cancer-model training with early
stopping, test-time augmentation, and ensembling.

All randomness flows through substreams of the run seed keyed by purpose
(epoch index, exam id, member id), so a rerun with the same config and
seed reproduces every byte, and per-exam work can be parallelized without
changing results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .evaluation import MetricError, roc_auc
from .heatmaps import load_heatmap
from .layers import Module
from .multiview import (MultiViewNet, OUTPUT_ORDER, VIEW_ORDER,
                        transfer_from_pretrained)
from .optim import AdamState, adam_step, binary_cross_entropy, nll_on_probs
from .pgm import read_pgm
from .phantom import MAXVAL, image_path
from .resample import bicubic_resize
from .seeding import substream

TRAIN_LOG_HEADER = "epoch,split,label,auc,loss"


@dataclass
class TrainRunConfig:
    task: str = "cancer"              # cancer | birads
    lr: float = 1e-5
    batch_size: int = 4               # 24 for the 3-way task, 100 for patches
    l2: float = 10 ** -4.5
    patience: int = 20
    max_epochs: int = 60
    seed: int = 0
    max_offset: int = 8               # crop jitter; 100 at full scale
    tta_samples: int = 10
    ensemble_size: int = 5
    variant: str = "view_wise"
    input_channels: int = 1
    epoch_exams: int = 0              # cap on exams per epoch (0 = no cap)
    val_exams: int = 0                # cap on exams scored per epoch (0 = all)
    improvement_eps: float = 1e-6

    def __post_init__(self):
        if self.patience < 1 or self.batch_size < 1 or self.tta_samples < 1:
            raise ValueError("patience, batch size, and tta_samples must be >= 1")


@dataclass
class EnsembleSpec:
    member_seeds: tuple
    init_checkpoint: str = ""         # shared column initialization

    def __post_init__(self):
        if len(self.member_seeds) < 1:
            raise ValueError("an ensemble needs at least one member")


# ---------------------------------------------------------------------------
# input preparation

def load_view_stack(record, data_dir, view, channels=1, heatmap_dir=None):
    """(C, H, W) float32 stack: image, plus heatmap planes when channels=3."""
    img = read_pgm(image_path(data_dir, record, view)).astype(np.float32) / MAXVAL
    if channels == 1:
        return img[None]
    if heatmap_dir is None:
        raise ValueError("3-channel input requires a heatmap directory")
    mal, ben = load_heatmap(Path(heatmap_dir) / f"{record.exam_id}_{view}.mshm")
    if mal.shape != img.shape:
        raise ValueError(f"heatmap dims {mal.shape} != image dims {img.shape}")
    return np.stack([img, mal, ben])


def augment_window(stack, rng, max_offset, target_dims=None):
    """Jittered crop of a (C, H, W) stack, zero-padded where the window
    leaves the image, cubic-resampled back to ``target_dims``.

    Each window edge moves independently by an integer in
    [-max_offset, max_offset], which realizes both size and location
    jitter while keeping every window corner within max_offset of the
    canonical crop.
    """
    c, h, w = stack.shape
    if target_dims is None:
        target_dims = (h, w)
    if max_offset == 0:
        out = stack
        if (h, w) != tuple(target_dims):
            out = np.stack([bicubic_resize(p, *target_dims) for p in stack])
        return np.ascontiguousarray(out, dtype=np.float32)

    d_top, d_bottom, d_left, d_right = rng.integers(
        -max_offset, max_offset + 1, size=4)
    top, bottom = int(d_top), h + int(d_bottom)
    left, right = int(d_left), w + int(d_right)
    wh, ww = bottom - top, right - left
    window = np.zeros((c, wh, ww), dtype=np.float32)
    sy0, sy1 = max(top, 0), min(bottom, h)
    sx0, sx1 = max(left, 0), min(right, w)
    window[:, sy0 - top:sy1 - top, sx0 - left:sx1 - left] = \
        stack[:, sy0:sy1, sx0:sx1]
    out = np.stack([bicubic_resize(p, *target_dims) for p in window])
    return np.ascontiguousarray(out, dtype=np.float32)


def prepare_views(record, data_dir, channels=1, heatmap_dir=None, rng=None,
                  max_offset=0, copies=1):
    """All four views as (copies, C, H, W) arrays, left views flipped so
    every breast is oriented the same way. Augmentation applies only when
    an rng is given."""
    out = {}
    for view in VIEW_ORDER:
        stack = load_view_stack(record, data_dir, view, channels, heatmap_dir)
        reps = []
        for _ in range(copies):
            if rng is not None and max_offset > 0:
                s = augment_window(stack, rng, max_offset)
            else:
                s = stack.astype(np.float32, copy=True)
            if view.startswith("l"):
                s = s[:, :, ::-1]
            reps.append(np.ascontiguousarray(s))
        out[view] = np.stack(reps)
    return out


def exam_labels(record):
    return np.array([record.left_benign, record.left_malignant,
                     record.right_benign, record.right_malignant],
                    dtype=np.float32)


# ---------------------------------------------------------------------------
# epoch construction

def subsample_epoch(records, rng):
    """All biopsied train exams plus an equally sized random draw of
    non-biopsied ones, shuffled. Returns exam ids."""
    train = [r for r in records if r.split == "train"]
    biopsied = [r.exam_id for r in train
                if r.left_biopsied or r.right_biopsied]
    clean = [r.exam_id for r in train
             if not (r.left_biopsied or r.right_biopsied)]
    if not biopsied:
        raise ValueError("no biopsied exams in the train split")
    if len(clean) < len(biopsied):
        print(f"warning: only {len(clean)} non-biopsied train exams for "
              f"{len(biopsied)} biopsied ones; taking all")
        chosen = clean
    else:
        idx = rng.choice(len(clean), size=len(biopsied), replace=False)
        chosen = [clean[i] for i in idx]
    ids = biopsied + chosen
    order = rng.permutation(len(ids))
    return [ids[i] for i in order]


def _batched(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _forward_batch(net, recs, data_dir, channels, heatmap_dir, rng, max_offset):
    views = {v: [] for v in VIEW_ORDER}
    for rec in recs:
        per = prepare_views(rec, data_dir, channels, heatmap_dir,
                            rng=rng, max_offset=max_offset)
        for v in VIEW_ORDER:
            views[v].append(per[v][0])
    tensors = {v: T.Tensor(np.stack(views[v])) for v in VIEW_ORDER}
    return net(tensors)


def predict_exams(net, records, data_dir, channels=1, heatmap_dir=None,
                  batch=8):
    """Deterministic eval-mode probabilities, (N, 4) aligned with records."""
    net.eval()
    rows = []
    for chunk in _batched(list(records), batch):
        probs = _forward_batch(net, chunk, data_dir, channels, heatmap_dir,
                               rng=None, max_offset=0)
        rows.append(probs.data)
    return np.concatenate(rows, axis=0)


def mean_label_auc(probs, labels, log=print):
    """Mean per-label AUC; single-class labels are skipped with a warning."""
    aucs = {}
    for i, name in enumerate(OUTPUT_ORDER):
        try:
            aucs[name] = roc_auc(probs[:, i], labels[:, i].astype(int))
        except MetricError:
            log(f"warning: label {name} has a single class; skipped in the "
                "validation metric")
    if not aucs:
        raise MetricError("no label had both classes in validation")
    return float(np.mean(list(aucs.values()))), aucs


# ---------------------------------------------------------------------------
# training loops

def _val_subset(records, split, cap, seed):
    subset = [r for r in records if r.split == split]
    if cap and cap < len(subset):
        rng = substream(seed, "valsubset")
        idx = rng.choice(len(subset), size=cap, replace=False)
        keep = {subset[i].exam_id for i in idx}
        # keep every biopsied exam so the metric always sees positives
        subset = [r for r in subset
                  if r.exam_id in keep or r.left_biopsied or r.right_biopsied]
    return subset


class EarlyStopper:
    """Strict-improvement tracker; also remembers the best state."""

    def __init__(self, patience, eps):
        self.patience = patience
        self.eps = eps
        self.best_metric = None
        self.best_epoch = None
        self.best_state = None
        self.stale = 0

    def update(self, metric, epoch, net):
        if self.best_metric is None or metric > self.best_metric + self.eps:
            self.best_metric = metric
            self.best_epoch = epoch
            self.best_state = {k: v.copy() for k, v in net.state_dict().items()}
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


def _write_log(path, rows):
    with open(path, "w", newline="") as f:
        f.write(TRAIN_LOG_HEADER + "\n")
        for epoch, split, label, auc, loss in rows:
            auc_s = "" if auc is None else f"{auc:.6f}"
            loss_s = "" if loss is None else f"{loss:.6f}"
            f.write(f"{epoch},{split},{label},{auc_s},{loss_s}\n")


def train_cancer_model(records, data_dir, cfg: TrainRunConfig,
                       heatmap_dir=None, init_state=None, log=print):
    """Four-label training with balanced epochs and AUC-based early stopping.

    Returns (net restored to its best state, log rows, best_epoch).
    """
    if init_state is not None:
        net = transfer_from_pretrained(init_state, variant=cfg.variant,
                                       input_channels=cfg.input_channels,
                                       task="cancer", seed=cfg.seed)
    else:
        net = MultiViewNet(variant=cfg.variant,
                           input_channels=cfg.input_channels,
                           task="cancer", seed=cfg.seed)
    params = net.parameters()
    state = AdamState(lr=cfg.lr, weight_decay=cfg.l2)
    stopper = EarlyStopper(cfg.patience, cfg.improvement_eps)
    val_records = _val_subset(records, "val", cfg.val_exams, cfg.seed)
    log_rows = []

    for epoch in range(1, cfg.max_epochs + 1):
        rng = substream(cfg.seed, "epoch", epoch)
        ids = subsample_epoch(records, rng)
        if cfg.epoch_exams and len(ids) > cfg.epoch_exams:
            ids = ids[:cfg.epoch_exams]
        by_id = {r.exam_id: r for r in records}
        net.train()
        losses = []
        train_probs, train_labels = [], []
        diverged = False
        for chunk_ids in _batched(ids, cfg.batch_size):
            recs = [by_id[i] for i in chunk_ids]
            probs = _forward_batch(net, recs, data_dir, cfg.input_channels,
                                   heatmap_dir, rng, cfg.max_offset)
            y = np.stack([exam_labels(r) for r in recs])
            loss = binary_cross_entropy(probs, y)
            if not np.isfinite(loss.data):
                diverged = True
                break
            grads = T.collect_gradients(loss, params)
            adam_step(params, grads, state)
            losses.append(float(loss.data))
            train_probs.append(probs.data)
            train_labels.append(y)
        if diverged:
            log(f"training diverged in epoch {epoch}; keeping best checkpoint")
            break

        train_loss = float(np.mean(losses))
        tp = np.concatenate(train_probs)
        tl = np.concatenate(train_labels)
        for i, name in enumerate(OUTPUT_ORDER):
            try:
                auc_i = roc_auc(tp[:, i], tl[:, i].astype(int))
            except MetricError:
                auc_i = None
            log_rows.append((epoch, "train", name, auc_i, train_loss))

        val_probs = predict_exams(net, val_records, data_dir,
                                  cfg.input_channels, heatmap_dir)
        val_y = np.stack([exam_labels(r) for r in val_records])
        val_loss = float(binary_cross_entropy(
            T.Tensor(val_probs), val_y).data)
        metric, per_label = mean_label_auc(val_probs, val_y, log)
        for name in OUTPUT_ORDER:
            log_rows.append((epoch, "val", name, per_label.get(name), val_loss))
        log_rows.append((epoch, "val", "mean", metric, val_loss))
        log(f"epoch {epoch}: train loss {train_loss:.4f} val mean auc "
            f"{metric:.4f}")
        if stopper.update(metric, epoch, net):
            log(f"no improvement for {cfg.patience} epochs; stopping")
            break

    if stopper.best_state is not None:
        net.load_state_dict(stopper.best_state)
    net.eval()
    return net, log_rows, stopper.best_epoch


def birads_ovr_auc(probs, labels, log=print):
    """Mean one-vs-rest AUC over the three assessment classes; classes
    absent from ``labels`` are skipped with a warning."""
    labels = np.asarray(labels)
    aucs = []
    for cls in (0, 1, 2):
        try:
            aucs.append(roc_auc(probs[:, cls], (labels == cls).astype(int)))
        except MetricError:
            log(f"warning: class {cls} missing in validation; one-vs-rest "
                "term skipped")
    if not aucs:
        raise MetricError("no assessment class present in validation")
    return float(np.mean(aucs))


def pretrain_birads(records, data_dir, cfg: TrainRunConfig, log=print):
    """3-way assessment pretraining; metric is the mean one-vs-rest AUC."""
    net = MultiViewNet(variant="view_wise", input_channels=cfg.input_channels,
                       task="birads", seed=cfg.seed)
    params = net.parameters()
    state = AdamState(lr=cfg.lr, weight_decay=cfg.l2)
    stopper = EarlyStopper(cfg.patience, cfg.improvement_eps)
    train = [r for r in records if r.split == "train"]
    val_records = _val_subset(records, "val", cfg.val_exams, cfg.seed)
    val_y = np.array([r.birads for r in val_records])
    log_rows = []

    for epoch in range(1, cfg.max_epochs + 1):
        rng = substream(cfg.seed, "birads-epoch", epoch)
        order = rng.permutation(len(train))
        if cfg.epoch_exams and len(order) > cfg.epoch_exams:
            order = order[:cfg.epoch_exams]
        net.train()
        losses = []
        diverged = False
        for chunk in _batched(list(order), cfg.batch_size):
            recs = [train[i] for i in chunk]
            probs = _forward_batch(net, recs, data_dir, cfg.input_channels,
                                   None, rng, cfg.max_offset)
            y = np.array([r.birads for r in recs])
            loss = nll_on_probs(probs, y)
            if not np.isfinite(loss.data):
                diverged = True
                break
            grads = T.collect_gradients(loss, params)
            adam_step(params, grads, state)
            losses.append(float(loss.data))
        if diverged:
            log(f"pretraining diverged in epoch {epoch}; keeping best state")
            break

        val_probs = predict_exams(net, val_records, data_dir,
                                  cfg.input_channels, None)
        metric = birads_ovr_auc(val_probs, val_y, log)
        train_loss = float(np.mean(losses)) if losses else None
        log_rows.append((epoch, "train", "birads", None, train_loss))
        log_rows.append((epoch, "val", "birads", metric, None))
        log(f"pretrain epoch {epoch}: loss {train_loss if train_loss is None else round(train_loss, 4)} "
            f"val ovr auc {metric:.4f}")
        if stopper.update(metric, epoch, net):
            log(f"no improvement for {cfg.patience} epochs; stopping")
            break

    if stopper.best_state is not None:
        net.load_state_dict(stopper.best_state)
    net.eval()
    return net, log_rows, stopper.best_epoch


# ---------------------------------------------------------------------------
# inference

def predict_tta(net, record, data_dir, rng, channels=1, heatmap_dir=None,
                n=10, max_offset=8):
    """Mean probability over n jittered forward passes of one exam."""
    if n < 1:
        raise ValueError("tta needs n >= 1")
    net.eval()
    views = prepare_views(record, data_dir, channels, heatmap_dir,
                          rng=rng if max_offset > 0 else None,
                          max_offset=max_offset, copies=n)
    tensors = {v: T.Tensor(views[v]) for v in VIEW_ORDER}
    probs = net(tensors)
    return probs.data.mean(axis=0)


def ensemble_predict(nets, record, data_dir, seed, channels=1,
                     heatmap_dir=None, n=10, max_offset=8):
    """Arithmetic mean of the members' TTA predictions."""
    if not nets:
        raise ValueError("an ensemble needs at least one member")
    outs = []
    for mi, net in enumerate(nets):
        rng = substream(seed, "tta", record.exam_id, mi)
        outs.append(predict_tta(net, record, data_dir, rng, channels,
                                heatmap_dir, n, max_offset))
    return np.mean(outs, axis=0)


def exam_activations(net, record, data_dir, tap, heatmap_dir=None):
    """Concatenated activation vector at ``tap`` for one exam (eval mode)."""
    net.eval()
    views = prepare_views(record, data_dir, net.input_channels, heatmap_dir)
    tensors = {v: T.Tensor(views[v]) for v in VIEW_ORDER}
    net(tensors)
    if tap not in net.last_taps:
        raise ValueError(f"tap {tap!r} not available "
                         f"(choose from {sorted(net.last_taps)})")
    return net.last_taps[tap][0]


def save_train_log(path, rows):
    _write_log(path, rows)
