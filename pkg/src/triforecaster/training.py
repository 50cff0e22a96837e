"""Training engine: Adam, the combined objective, region-round-robin
batching, early stopping, and deterministic evaluation.

Batches are region-homogeneous. Within an epoch the loop cycles regions in
a fixed order, one batch per region per cycle, with the same number of
cycles for every region; smaller regions wrap around their shuffled sample
streams. Equal per-region step counts realize the objective that weights
every region equally regardless of its sample count.

Contrastive pairs are rebuilt every epoch from a fresh seeded stream and
held fixed within the epoch. They are never built when the contrastive
weight is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tt
from .config import TrainConfig
from .ct_specializer import contrastive_terms_batch
from .data import DatasetBundle, contrastive_pairs
from .exceptions import ContractError, DimensionError
from .fusion import EVAL, TRAIN, ForwardContext
from .models import STLNet, build_model, dims_from_bundle, load_state, state_dict
from .tensor import Tensor

HISTORY_COLUMNS = ("epoch", "region", "split", "mse", "mae", "loss")


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.second_moment = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            grad = p.grad if p.grad is not None else 0.0
            m = self.first_moment[i]
            v = self.second_moment[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(grad)
            p.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def collate(samples):
    """Stack samples into (hist, future, target) constants."""
    hist = Tensor(np.stack([s.hist for s in samples]))
    if samples[0].future.shape[1]:
        future = Tensor(np.stack([s.future for s in samples]))
    else:
        future = None
    target = np.stack([s.target for s in samples])
    return hist, future, target


def total_loss(pred, target, contrastive_terms=None, alpha=0.0):
    """Mean squared error over every batch/horizon element, plus the
    weighted mean of the per-sample contrastive terms."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(
            f"loss: prediction {pred.shape} vs target {target.shape}"
        )
    loss = tt.mean(tt.square(tt.sub(pred, tt.constant(target))))
    if alpha > 0 and contrastive_terms is not None:
        loss = tt.add(loss, tt.scale(tt.mean(contrastive_terms), alpha))
    return loss


class _SampleStream:
    """Cycled, shuffled index stream over one region's training samples."""

    def __init__(self, count, rng):
        self.count = count
        self.rng = rng
        self.order = rng.permutation(count)
        self.pos = 0

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos >= self.count:
                self.order = self.rng.permutation(self.count)
                self.pos = 0
            grab = min(k - len(out), self.count - self.pos)
            out.extend(self.order[self.pos:self.pos + grab].tolist())
            self.pos += grab
        return out


def _stream_rng(seed, *tags):
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def build_epoch_pairs(bundle: DatasetBundle, region_id, rng, num_negatives):
    """Contrastive pairs for every training sample of one region.

    The pairwise context distances are computed once and fed through the
    same per-sample selection used by ``contrastive_pairs``.
    """
    pool = bundle.train[region_id]
    contexts = np.stack([s.context_vector for s in pool])
    sq = np.sum(contexts ** 2, axis=1)
    gram = contexts @ contexts.T
    distances = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0))
    pairs = {}
    for i, sample in enumerate(pool):
        row = np.delete(distances[i], i)
        positive, negatives = contrastive_pairs(
            sample, pool, num_negatives, rng, bundle.lookback, bundle.horizon,
            _distances=row,
        )
        pairs[sample.anchor_index] = (positive, negatives)
    return pairs


def predict(model, samples, region_index, batch_size=256, pool_mode="expectation",
            seed=0):
    """Normalized predictions for a list of same-region samples: (n, horizon)."""
    if not samples:
        raise ContractError("predict called with no samples")
    outputs = []
    rng = _stream_rng(seed, 101, region_index)
    with tt.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            hist, future, _ = collate(chunk)
            if pool_mode == "sample":
                ctx = ForwardContext(mode=TRAIN, rng=rng)
            else:
                ctx = ForwardContext(mode=EVAL)
            pred, _ = model.forward(hist, future, region_index, ctx)
            outputs.append(pred.data[:, :, 0])
    return np.concatenate(outputs, axis=0)


def evaluate(model, bundle: DatasetBundle, split="test", batch_size=256,
             pool_mode="expectation", seed=0):
    """Per-region and mean MSE/MAE on the normalized scale.

    Errors are pooled over all of a region's samples before averaging, so
    the result does not depend on the batch partition; the mean weights
    regions equally.
    """
    samples_by_region = bundle.split(split)
    if all(not samples_by_region[rid] for rid in bundle.region_ids):
        raise ContractError(f"split {split!r} is empty")
    per_region = {}
    for index, rid in enumerate(bundle.region_ids):
        samples = samples_by_region[rid]
        if not samples:
            raise ContractError(f"split {split!r} has no samples for region {rid}")
        preds = predict(model, samples, index, batch_size=batch_size,
                        pool_mode=pool_mode, seed=seed)
        targets = np.stack([s.target[:, 0] for s in samples])
        errors = preds - targets
        per_region[rid] = {
            "mse": float(np.mean(errors ** 2)),
            "mae": float(np.mean(np.abs(errors))),
        }
    mean = {
        key: float(np.mean([per_region[rid][key] for rid in bundle.region_ids]))
        for key in ("mse", "mae")
    }
    return {"regions": per_region, "mean": mean}


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_metric: float
    epochs_run: int
    metrics: dict


def _uses_contrastive(cfg: TrainConfig):
    return (
        cfg.model == "triforecaster"
        and cfg.alpha > 0
        and cfg.moe_blocks > 0
        and cfg.ablate != "contextmoe"
    )


def train(model, bundle: DatasetBundle, cfg: TrainConfig, include_aggregate=True,
          log=None):
    """Optimize ``model`` on the bundle's training split.

    Tracks the aggregate validation MSE per epoch (training MSE when there
    is no validation split), keeps the best parameter snapshot, stops after
    ``patience`` epochs without improvement, and restores the best snapshot
    before returning.
    """
    cfg.validate()
    region_ids = bundle.region_ids
    for rid in region_ids:
        if not bundle.train[rid]:
            raise ContractError(f"region {rid} has no training samples")
    has_val = all(bundle.val[rid] for rid in region_ids)
    use_contrastive = _uses_contrastive(cfg)
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    pool_rng = _stream_rng(cfg.seed, 2)
    steps_per_region = max(
        1, math.ceil(max(len(bundle.train[rid]) for rid in region_ids) / cfg.batch_size)
    )
    history = []
    best_metric = math.inf
    best_state = None
    best_epoch = 0
    epochs_without_improvement = 0
    epochs_run = 0

    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        streams = {
            rid: _SampleStream(len(bundle.train[rid]), _stream_rng(cfg.seed, 1, epoch, ri))
            for ri, rid in enumerate(region_ids)
        }
        pairs = {}
        if use_contrastive:
            pairs = {
                rid: build_epoch_pairs(
                    bundle, rid, _stream_rng(cfg.seed, 3, epoch, ri), cfg.num_negatives
                )
                for ri, rid in enumerate(region_ids)
            }
        stats = {rid: {"sq": 0.0, "abs": 0.0, "loss": 0.0, "count": 0, "batches": 0}
                 for rid in region_ids}
        for _ in range(steps_per_region):
            for ri, rid in enumerate(region_ids):
                batch_idx = streams[rid].take(min(cfg.batch_size, len(bundle.train[rid])))
                batch = [bundle.train[rid][i] for i in batch_idx]
                hist, future, target = collate(batch)
                ctx = ForwardContext(mode=TRAIN, rng=pool_rng)
                pred, anchor_repr = model.forward(
                    hist, future, ri, ctx, collect_context=use_contrastive
                )
                terms = None
                if use_contrastive and anchor_repr is not None:
                    region_pairs = pairs[rid]
                    pos_samples = [region_pairs[s.anchor_index][0] for s in batch]
                    p_hist, p_future, _ = collate(pos_samples)
                    _, pos_repr = model.forward(
                        p_hist, p_future, ri, ForwardContext(mode=TRAIN, rng=pool_rng),
                        collect_context=True,
                    )
                    neg_reprs = []
                    for k in range(cfg.num_negatives):
                        neg_samples = [region_pairs[s.anchor_index][1][k] for s in batch]
                        n_hist, n_future, _ = collate(neg_samples)
                        _, neg_repr = model.forward(
                            n_hist, n_future, ri,
                            ForwardContext(mode=TRAIN, rng=pool_rng),
                            collect_context=True,
                        )
                        neg_reprs.append(neg_repr)
                    terms = contrastive_terms_batch(
                        anchor_repr, pos_repr, neg_reprs, cfg.temperature
                    )
                loss = total_loss(pred, target, terms, cfg.alpha)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                errors = pred.data[:, :, 0] - target[:, :, 0]
                s = stats[rid]
                s["sq"] += float(np.mean(errors ** 2))
                s["abs"] += float(np.mean(np.abs(errors)))
                s["loss"] += float(loss.data)
                s["count"] += len(batch)
                s["batches"] += 1

        train_rows = {}
        for rid in region_ids:
            s = stats[rid]
            train_rows[rid] = {
                "mse": s["sq"] / s["batches"],
                "mae": s["abs"] / s["batches"],
                "loss": s["loss"] / s["batches"],
            }
            history.append({
                "epoch": epoch, "region": rid, "split": "train",
                "mse": train_rows[rid]["mse"], "mae": train_rows[rid]["mae"],
                "loss": train_rows[rid]["loss"],
            })
        train_mean = {
            key: float(np.mean([train_rows[rid][key] for rid in region_ids]))
            for key in ("mse", "mae", "loss")
        }
        if include_aggregate:
            history.append({
                "epoch": epoch, "region": "all", "split": "train",
                "mse": train_mean["mse"], "mae": train_mean["mae"],
                "loss": train_mean["loss"],
            })
        if has_val:
            val = evaluate(model, bundle, "val", pool_mode=cfg.eval_pool_mode,
                           seed=cfg.seed)
            for rid in region_ids:
                history.append({
                    "epoch": epoch, "region": rid, "split": "val",
                    "mse": val["regions"][rid]["mse"],
                    "mae": val["regions"][rid]["mae"], "loss": "",
                })
            if include_aggregate:
                history.append({
                    "epoch": epoch, "region": "all", "split": "val",
                    "mse": val["mean"]["mse"], "mae": val["mean"]["mae"],
                    "loss": "",
                })
            metric = val["mean"]["mse"]
        else:
            metric = train_mean["mse"]
        if log is not None:
            log(f"epoch {epoch}: train mse {train_mean['mse']:.6f}, "
                f"{'val mse %.6f' % metric if has_val else 'no validation split'}")
        if metric < best_metric:
            best_metric = metric
            best_state = state_dict(model)
            best_epoch = epoch
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
        if epochs_without_improvement >= cfg.patience:
            break

    if best_state is not None:
        load_state(model, best_state)
    metrics = {}
    if has_val:
        metrics["val"] = evaluate(model, bundle, "val", pool_mode=cfg.eval_pool_mode,
                                  seed=cfg.seed)
    if all(bundle.test[rid] for rid in region_ids):
        metrics["test"] = evaluate(model, bundle, "test", pool_mode=cfg.eval_pool_mode,
                                   seed=cfg.seed)
    return TrainResult(
        history=history, best_epoch=best_epoch, best_metric=best_metric,
        epochs_run=epochs_run, metrics=metrics,
    )


def _single_region_view(bundle: DatasetBundle, rid):
    return DatasetBundle(
        region_ids=[rid],
        lookback=bundle.lookback,
        horizon=bundle.horizon,
        interval_minutes=bundle.interval_minutes,
        hist_channels=bundle.hist_channels,
        future_channels=bundle.future_channels,
        train={rid: bundle.train[rid]},
        val={rid: bundle.val[rid]},
        test={rid: bundle.test[rid]},
        stats=bundle.stats,
        series={rid: bundle.series[rid]},
        manifest=bundle.manifest,
    )


def train_stl(model: STLNet, bundle: DatasetBundle, cfg: TrainConfig, log=None):
    """Train each region's standalone model independently.

    Every sub-model gets its own optimizer, early stopping, and best
    snapshot; histories are concatenated with the region column telling
    them apart."""
    history = []
    best_epochs = []
    for ri, rid in enumerate(bundle.region_ids):
        sub = _single_region_view(bundle, rid)
        result = train(model.nets[ri], sub, cfg, include_aggregate=False, log=log)
        history.extend(result.history)
        best_epochs.append(result.best_epoch)
    metrics = {}
    if all(bundle.val[rid] for rid in bundle.region_ids):
        metrics["val"] = evaluate(model, bundle, "val", pool_mode=cfg.eval_pool_mode,
                                  seed=cfg.seed)
    if all(bundle.test[rid] for rid in bundle.region_ids):
        metrics["test"] = evaluate(model, bundle, "test", pool_mode=cfg.eval_pool_mode,
                                   seed=cfg.seed)
    best_metric = metrics.get("val", metrics.get("test", {})).get("mean", {}).get("mse", math.nan)
    return TrainResult(
        history=history, best_epoch=max(best_epochs), best_metric=best_metric,
        epochs_run=max(best_epochs), metrics=metrics,
    )


def run_training(cfg: TrainConfig, bundle: DatasetBundle, log=None):
    """Build the configured model and train it; returns (model, result)."""
    cfg.validate()
    init_rng = _stream_rng(cfg.seed, 0)
    model = build_model(cfg, dims_from_bundle(bundle), init_rng)
    if cfg.model == "stl":
        result = train_stl(model, bundle, cfg, log=log)
    else:
        result = train(model, bundle, cfg, log=log)
    return model, result


def write_history_csv(path, rows):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            writer.writerow([
                row["epoch"], row["region"], row["split"],
                repr(float(row["mse"])), repr(float(row["mae"])),
                "" if row["loss"] == "" else repr(float(row["loss"])),
            ])
