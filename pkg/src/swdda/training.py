"""Adversarial two-classifier training with a sliced Wasserstein discrepancy.

Each outer iteration runs three updates:

1. G, C1, C2 descend the source cross-entropy.
2. C1, C2 descend ``source_loss - discrepancy(target)``; G is frozen.
3. G descends ``discrepancy(target)``; C1, C2 are frozen.

``mode="grl"`` fuses steps 2 and 3 into one update by routing the target
features through a gradient reversal layer. ``mode="source_only"`` runs step 1
alone and is the no-adaptation baseline.
"""

import csv
import math
from dataclasses import asdict, dataclass, fields
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tensor
from .data import LabeledDataset, minibatches
from .models import forward_classifier, forward_generator, predict
from .ot_core import CostKind, ProjectionSet, sample_projections, swd

MODES = ("three_step", "grl", "source_only")
DISCREPANCIES = ("swd", "l1")
OPTIMIZERS = ("adam", "sgd_momentum")


@dataclass
class TrainConfig:
    outer_iterations: int = 1000
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    num_projections: int = 128
    cost: str = "quadratic"
    reuse_projections_in_step3: bool = True
    discrepancy_kind: str = "swd"
    mode: str = "three_step"
    grl_lambda: float = 1.0
    n_step3: int = 1
    discrepancy_weight: float = 1.0
    use_softmax: bool = True
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def validate(self):
        for name in ("outer_iterations", "batch_size", "num_projections", "n_step3"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive and finite")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.discrepancy_kind not in DISCREPANCIES:
            raise ValueError(f"discrepancy_kind must be one of {DISCREPANCIES}")
        CostKind(self.cost)
        if not (self.discrepancy_weight > 0 and math.isfinite(self.discrepancy_weight)):
            raise ValueError("discrepancy_weight must be positive and finite")
        if not math.isfinite(self.grl_lambda):
            raise ValueError("grl_lambda must be finite")
        return self


@dataclass
class StepRecord:
    iteration: int
    source_loss: float
    discrepancy_before_step3: float
    discrepancy_after_step3: float
    source_accuracy: float
    target_accuracy: float


def make_optimizers(cfg):
    """Separate states for G and for (C1, C2) so freezing never touches the other's moments."""
    def state():
        return OptimizerState(kind=cfg.optimizer, lr=cfg.learning_rate,
                              momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return {"generator": state(), "classifiers": state()}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def source_loss(bundle, xs, ys, features=None):
    """Mean of the two classifiers' cross-entropies on a labelled batch."""
    if features is None:
        features = forward_generator(bundle, Tensor(xs))
    l1 = ad.softmax_cross_entropy_mean(forward_classifier(bundle.c1_params, features), ys)
    l2 = ad.softmax_cross_entropy_mean(forward_classifier(bundle.c2_params, features), ys)
    return ad.scale(ad.add(l1, l2), 0.5)


def discrepancy(logits1, logits2, cfg, dirs=None):
    """Discrepancy between the two classifiers' outputs on one target batch.

    ``swd`` slices the (optionally softmaxed) outputs along ``dirs``; ``l1`` is
    the mean absolute difference of the softmax outputs.
    """
    if cfg.discrepancy_kind == "l1":
        return ad.mean(ad.absolute(ad.softmax(logits1) - ad.softmax(logits2)))
    if cfg.use_softmax:
        logits1, logits2 = ad.softmax(logits1), ad.softmax(logits2)
    return swd(logits1, logits2, dirs, CostKind(cfg.cost))


def target_discrepancy(bundle, xt, cfg, dirs=None, features=None, reverse_lambda=None):
    if features is None:
        features = forward_generator(bundle, Tensor(xt))
    if reverse_lambda is not None:
        features = ad.grad_reverse(features, reverse_lambda)
    p1 = forward_classifier(bundle.c1_params, features)
    p2 = forward_classifier(bundle.c2_params, features)
    return discrepancy(p1, p2, cfg, dirs)


# ---------------------------------------------------------------------------
# the three steps
# ---------------------------------------------------------------------------

def step_source(bundle, xs, ys, opt_states):
    """Step 1: all networks descend the source loss. Returns the loss value."""
    if len(xs) == 0:
        raise ValueError("empty source batch")
    bundle.zero_grad()
    loss = source_loss(bundle, xs, ys)
    ad.backward(loss)
    ad.optimizer_step(opt_states["generator"], bundle.generator_tensors())
    ad.optimizer_step(opt_states["classifiers"], bundle.classifier_tensors())
    return loss.item()


def step_max_discrepancy(bundle, xs, ys, xt, dirs, opt_states, cfg, include_source=True):
    """Step 2: classifiers descend ``L_s - L_dis``; G is held fixed.

    Returns the discrepancy measured before the update.
    """
    if len(xt) == 0:
        raise ValueError("empty target batch")
    bundle.zero_grad()
    # generator outputs enter as constants: nothing flows back into G
    ft = forward_generator(bundle, Tensor(xt)).detach()
    dis = target_discrepancy(bundle, xt, cfg, dirs, features=ft)
    loss = ad.scale(dis, -cfg.discrepancy_weight)
    if include_source:
        fs = forward_generator(bundle, Tensor(xs)).detach()
        loss = ad.add(source_loss(bundle, xs, ys, features=fs), loss)
    ad.backward(loss)
    ad.optimizer_step(opt_states["classifiers"], bundle.classifier_tensors())
    return dis.item()


def step_min_discrepancy(bundle, xt, dirs, opt_states, cfg):
    """Step 3: G descends the target discrepancy; classifiers are held fixed.

    Returns the discrepancy measured before the update.
    """
    if len(xt) == 0:
        raise ValueError("empty target batch")
    bundle.zero_grad()
    dis = target_discrepancy(bundle, xt, cfg, dirs)
    ad.backward(ad.scale(dis, cfg.discrepancy_weight))
    ad.optimizer_step(opt_states["generator"], bundle.generator_tensors())
    return dis.item()


def step_grl(bundle, xs, ys, xt, dirs, opt_states, cfg):
    """Fused update: ``L_s - L_dis`` with a gradient reversal layer after G.

    Classifiers ascend the discrepancy while the reversed gradient makes G
    descend it, all in one optimizer step. Returns (source loss, discrepancy).
    """
    bundle.zero_grad()
    ls = source_loss(bundle, xs, ys)
    dis = target_discrepancy(bundle, xt, cfg, dirs, reverse_lambda=cfg.grl_lambda)
    ad.backward(ad.sub(ls, ad.scale(dis, cfg.discrepancy_weight)))
    ad.optimizer_step(opt_states["generator"], bundle.generator_tensors())
    ad.optimizer_step(opt_states["classifiers"], bundle.classifier_tensors())
    return ls.item(), dis.item()


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def evaluate(bundle, ds):
    """Fraction of rows whose fused prediction matches the label."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(bundle, ds.points) == ds.labels))


class _BatchStream:
    """Endless seeded epochs of mini-batch indices over one dataset."""

    def __init__(self, n, batch_size, seed_seq):
        self.n, self.batch_size, self.seed_seq = n, batch_size, seed_seq
        self.epoch = 0
        self._pending = []

    def next(self):
        if not self._pending:
            epoch_seed = np.random.SeedSequence(self.seed_seq.entropy, spawn_key=self.seed_seq.spawn_key + (self.epoch,))
            self._pending = list(reversed(minibatches(self.n, self.batch_size, epoch_seed)))
            self.epoch += 1
        return self._pending.pop()


def _projection_seed(seed, iteration):
    return int(np.random.SeedSequence([seed, 0x5EED, iteration]).generate_state(1, np.uint64)[0])


def train(cfg, bundle, source, target, opt_states=None):
    """Run ``cfg.outer_iterations`` adaptation iterations in place on ``bundle``.

    ``target`` may carry labels; they are used only for the per-iteration
    target accuracy in the history, never for training. Returns
    ``(bundle, history)``.
    """
    cfg.validate()
    if len(source) == 0 or len(target) == 0:
        raise ValueError("datasets must be non-empty")
    if source.dim != bundle.generator_spec.input_width or target.dim != source.dim:
        raise ValueError("dataset dimension does not match the generator input width")
    k = bundle.classifier_spec.output_width
    if source.class_count > k:
        raise ValueError(f"{source.class_count} classes but classifiers emit {k} logits")
    opt_states = opt_states or make_optimizers(cfg)
    src_seq, tgt_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    src_stream = _BatchStream(len(source), cfg.batch_size, src_seq)
    tgt_stream = _BatchStream(len(target), cfg.batch_size, tgt_seq)
    target_labeled = isinstance(target, LabeledDataset)

    history: List[StepRecord] = []
    for it in range(cfg.outer_iterations):
        si = src_stream.next()
        ti = tgt_stream.next()
        xs, ys, xt = source.points[si], source.labels[si], target.points[ti]
        dirs = sample_projections(cfg.num_projections, k, _projection_seed(cfg.seed, it))

        if cfg.mode == "grl":
            ls, before = step_grl(bundle, xs, ys, xt, dirs, opt_states, cfg)
        else:
            ls = step_source(bundle, xs, ys, opt_states)
            if cfg.mode == "three_step":
                step_max_discrepancy(bundle, xs, ys, xt, dirs, opt_states, cfg)
                dirs3 = dirs
                for j in range(cfg.n_step3):
                    if not cfg.reuse_projections_in_step3:
                        dirs3 = sample_projections(cfg.num_projections, k,
                                                   _projection_seed(cfg.seed, (it + 1) * 1_000_003 + j))
                    d = step_min_discrepancy(bundle, xt, dirs3, opt_states, cfg)
                    if j == 0:
                        before = d
                dirs = dirs3
            else:
                before = target_discrepancy(bundle, xt, cfg, dirs).item()
        after = target_discrepancy(bundle, xt, cfg, dirs).item()
        history.append(StepRecord(
            iteration=it,
            source_loss=ls,
            discrepancy_before_step3=before,
            discrepancy_after_step3=after,
            source_accuracy=evaluate(bundle, source),
            target_accuracy=evaluate(bundle, target) if target_labeled else float("nan"),
        ))
    return bundle, history


HISTORY_COLUMNS = [f.name for f in fields(StepRecord)]


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_history_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([_fmt(v) for v in asdict(rec).values()])
