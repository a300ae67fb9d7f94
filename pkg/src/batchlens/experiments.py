"""Training and the inference protocols the framework exists to compare.

A run trains a network under a batch plan (random or balanced), then
measures error under up to three protocols:

* standard           -- frozen population statistics, per-image inference;
                        batch composition provably irrelevant.
* balanced           -- test images grouped into balanced batches by their
                        TRUE labels, normalized with each batch's own
                        statistics. The grouping needs ground-truth labels,
                        so these numbers are conditional, not a deployable
                        improvement; every consumer of this protocol
                        carries that caveat.
* shuffled-balanced  -- balanced, with groupings re-randomized over several
                        passes and the error averaged.

Two probe experiments expose what a balanced-trained network has learned:
circulation (replace one or two members of a high-confidence balanced
batch and watch the visitor get assigned the missing class) and iterative
rebalancing (group by predicted labels, re-infer, repeat; the error stays
roughly where standard inference left it).
"""

import csv
import json
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .batchnorm import BnMode
from .data import (BALANCED, RANDOM, AugmentConfig, BatchPlan, Sampler, augment,
                   center_crop, load_cifar10, make_synthetic_split)
from .layers import softmax_xent
from .models import build, get_model_spec, predict_logits
from .optim import LrSchedule, Rmsprop, Sgd
from .tensor import Rng

PROTOCOL_STANDARD = "standard"
PROTOCOL_BALANCED = "balanced"
PROTOCOL_SHUFFLED = "shuffled-balanced"
PROTOCOLS = (PROTOCOL_STANDARD, PROTOCOL_BALANCED, PROTOCOL_SHUFFLED)

CONDITIONAL_WARNING = (
    "WARNING: balanced evaluation groups test images by their ground-truth "
    "labels; the resulting error rates are conditional and do not constitute "
    "a deployable classifier improvement.")


@dataclass
class ExperimentConfig:
    model: str = "toy-6"
    classes: int = 10
    dataset: str = "synthetic"  # synthetic | cifar10
    synth_train: int = 100      # images per class
    synth_test: int = 100
    synth_noise: float = 1.7
    synth_channels: int = 3
    synth_size: int = 12
    synth_crop: int = 0         # 0 = no translation headroom (crop = size)
    synth_sign: bool = False    # sign-symmetric classes (axis, not direction)
    train_plan: str = BALANCED
    batch_size: int = 10        # random-plan batch size
    epochs: int = 40
    optimizer: str = "sgd"      # sgd | rmsprop
    lr_schedule: str = "0:0.1,20:0.01,30:0.001"
    weight_decay: float = 1e-4
    momentum: float = 0.9
    rmsprop_decay: float = 0.999
    eval_protocols: str = "standard,balanced"
    eval_every: int = 10
    eval_batch: int = 100
    balanced_repeats: int = 8
    stats: str = "ema"          # ema | fullpass
    augment: bool = False
    flip: bool = True
    brightness: float = 0.0
    theta: float = 0.99
    iterations: int = 20
    visitors: str = "weak:1"
    seed: int = 0
    mode: str = "deterministic"  # deterministic | fast

    def protocols(self):
        names = [p.strip() for p in self.eval_protocols.split(",") if p.strip()]
        for p in names:
            if p not in PROTOCOLS:
                raise ValueError(f"unknown eval protocol {p!r}; have {PROTOCOLS}")
        return tuple(names)


@dataclass
class MetricsRow:
    epoch: int
    protocol: str
    error_rate: float
    loss: float
    seconds: float = 0.0


@dataclass
class EvalResult:
    error: float
    loss: float
    predictions: np.ndarray = None
    probabilities: np.ndarray = None


@dataclass
class TrainResult:
    network: object
    rows: list
    diverged: bool = False


def load_datasets(cfg, data_dir=None):
    if cfg.dataset == "synthetic":
        size = (cfg.synth_channels, cfg.synth_size, cfg.synth_size)
        return make_synthetic_split(cfg.classes, cfg.synth_train, cfg.synth_test,
                                    size, Rng(cfg.seed).split(1), cfg.synth_noise,
                                    crop=cfg.synth_crop or None,
                                    sign_symmetric=cfg.synth_sign)
    if cfg.dataset == "cifar10":
        if not data_dir:
            raise ValueError("cifar10 needs a data directory")
        return load_cifar10(data_dir)
    raise ValueError(f"unknown dataset {cfg.dataset!r}")


def _make_optimizer(cfg, network):
    decay_names = network.decay_param_names()
    schedule = LrSchedule.parse(cfg.lr_schedule)
    if cfg.optimizer == "sgd":
        opt = Sgd(schedule.lr_at(0), cfg.weight_decay, cfg.momentum, decay_names)
    elif cfg.optimizer == "rmsprop":
        opt = Rmsprop(schedule.lr_at(0), cfg.weight_decay, cfg.rmsprop_decay,
                      decay_names=decay_names)
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    return opt, schedule


def train(cfg, train_ds, test_ds):
    """Run the full training protocol and return the network plus metrics.

    Each epoch samples batches under the plan, augments (if enabled),
    forwards in TRAIN mode, backpropagates and steps the optimizer.
    Requested protocols are evaluated every eval_every epochs and at the
    end. A non-finite loss aborts with a diagnostic row.
    """
    rng = Rng(cfg.seed)
    spec = get_model_spec(cfg.model, classes=train_ds.class_count,
                          in_channels=train_ds.images.shape[1])
    network = build(spec, rng.split(2))
    plan = _train_batch_plan(cfg)
    sampler = Sampler(train_ds, plan, rng.split(3))
    aug_rng = rng.split(4)
    aug_cfg = AugmentConfig(enabled=cfg.augment, crop=train_ds.crop,
                            flip=cfg.flip, brightness=cfg.brightness)
    opt, schedule = _make_optimizer(cfg, network)
    timer = _Timer(cfg.mode == "fast")
    rows = []
    protocols = cfg.protocols()
    class_range = np.arange(train_ds.class_count)
    for epoch in range(cfg.epochs):
        opt.lr = schedule.lr_at(epoch)
        losses = []
        hits = 0
        seen = 0
        for _ in range(sampler.batches_per_epoch()):
            images, labels, _ = sampler.next_batch()
            if plan.kind != RANDOM:
                # the load-bearing invariant: one image of every class
                assert np.array_equal(np.sort(labels), class_range), \
                    "balanced sampler emitted an unbalanced batch"
            if cfg.augment:
                images = augment(images, aug_rng, aug_cfg)
            else:
                images = center_crop(images, train_ds.crop)
            logits, caches = network.forward(images, BnMode.TRAIN)
            loss, grad_logits, _ = softmax_xent(logits, labels)
            if not np.isfinite(loss):
                rows.append(MetricsRow(epoch, "diverged", 1.0, loss, timer.read()))
                return TrainResult(network, rows, diverged=True)
            losses.append(loss)
            hits += int((logits.argmax(axis=1) == labels).sum())
            seen += len(labels)
            _, grads = network.backward(caches, grad_logits)
            try:
                opt.step(network.params(), grads)
            except ValueError as err:
                if "non-finite" not in str(err):
                    raise
                rows.append(MetricsRow(epoch, "diverged", 1.0, float("inf"),
                                       timer.read()))
                return TrainResult(network, rows, diverged=True)
        rows.append(MetricsRow(epoch, "train", 1.0 - hits / seen,
                               float(np.mean(losses)), timer.read()))
        last = epoch == cfg.epochs - 1
        if protocols and ((epoch + 1) % cfg.eval_every == 0 or last):
            rows.extend(_evaluate_protocols(cfg, network, train_ds, test_ds,
                                            protocols, epoch, rng.split(5).split(epoch),
                                            timer))
    if cfg.stats == "fullpass":
        # leave the network carrying its inference-time statistics
        apply_population(network, freeze_population(
            network, train_ds, "fullpass", _train_batch_plan(cfg),
            Rng(cfg.seed).split(6)))
    return TrainResult(network, rows)


def _train_batch_plan(cfg):
    if cfg.train_plan == RANDOM:
        return BatchPlan(RANDOM, cfg.batch_size)
    return BatchPlan(cfg.train_plan)


class _Timer:
    """Wall-clock when enabled; constant zero in deterministic mode so
    serialized outputs are byte-reproducible."""

    def __init__(self, enabled):
        self.enabled = enabled
        self.start = time.perf_counter()

    def read(self):
        return time.perf_counter() - self.start if self.enabled else 0.0


def _evaluate_protocols(cfg, network, train_ds, test_ds, protocols, epoch, rng, timer):
    rows = []
    for protocol in protocols:
        if protocol == PROTOCOL_STANDARD:
            with _population_stats(network, train_ds, cfg):
                res = eval_standard(network, test_ds, cfg.eval_batch)
        elif protocol == PROTOCOL_BALANCED:
            res = eval_balanced(network, test_ds, rng.split(1))
        else:
            res = eval_balanced(network, test_ds, rng.split(2), shuffled=True,
                                repeats=cfg.balanced_repeats)
        rows.append(MetricsRow(epoch, protocol, res.error, res.loss, timer.read()))
    return rows


def freeze_population(network, train_ds, strategy, plan, rng=None):
    """Population statistics for standard inference.

    ema: the running averages accumulated during training. fullpass: stream
    one epoch of the training data, batched under the given plan so batch
    composition matches what training calibrated to, through the network
    with batch-statistics normalization (no parameter updates), and take
    the simple average of the per-batch mean/variance for every BN layer.
    """
    if len(train_ds) == 0:
        raise ValueError("cannot freeze population statistics on an empty dataset")
    if strategy == "ema":
        return {name: (bn.running_mean.copy(), bn.running_var.copy())
                for name, bn in network.norm_layers()}
    if strategy != "fullpass":
        raise ValueError(f"unknown statistics strategy {strategy!r}")
    sampler = Sampler(train_ds, plan, rng if rng is not None else Rng(0))
    count = sampler.batches_per_epoch()
    sums = None
    for _ in range(count):
        images, _, _ = sampler.next_batch()
        images = center_crop(images, train_ds.crop)
        _, caches = network.forward(images, BnMode.EVAL_BATCH_STATS)
        stats = network.bn_batch_stats(caches)
        if sums is None:
            sums = {name: [mean.astype(np.float64), var.astype(np.float64)]
                    for name, (mean, var) in stats.items()}
        else:
            for name, (mean, var) in stats.items():
                sums[name][0] += mean
                sums[name][1] += var
    return {name: ((s[0] / count).astype(np.float32), (s[1] / count).astype(np.float32))
            for name, s in sums.items()}


def apply_population(network, stats):
    for name, bn in network.norm_layers():
        mean, var = stats[name]
        bn.set_population(mean, var)


class _population_stats:
    """Apply the configured statistics strategy around an eval; restore the
    training-time running averages afterwards."""

    def __init__(self, network, train_ds, cfg):
        self.network = network
        self.train_ds = train_ds
        self.cfg = cfg
        self.saved = None

    def __enter__(self):
        if self.cfg.stats == "fullpass":
            stats = freeze_population(self.network, self.train_ds, "fullpass",
                                      _train_batch_plan(self.cfg),
                                      Rng(self.cfg.seed).split(6))
            self.saved = {name: (bn.running_mean.copy(), bn.running_var.copy())
                          for name, bn in self.network.norm_layers()}
            apply_population(self.network, stats)
        return self.network

    def __exit__(self, *exc):
        if self.saved is not None:
            apply_population(self.network, self.saved)
        return False


def eval_standard(network, test_ds, batch_size=100):
    """Per-image inference with frozen population statistics; the batch
    grouping provably cannot change any prediction."""
    images = center_crop(test_ds.images, test_ds.crop)
    logits = predict_logits(network, images, BnMode.EVAL_POPULATION, batch_size)
    loss, _, probs = softmax_xent(logits, test_ds.labels)
    preds = logits.argmax(axis=1)  # ties resolve to the lowest class id
    error = float(np.mean(preds != test_ds.labels))
    return EvalResult(error, loss, preds, probs)


def eval_balanced(network, test_ds, rng, shuffled=False, repeats=1):
    """Balanced-batch inference with each batch's own statistics.

    Groups test images by TRUE label, one per class per batch (the
    conditional protocol). With shuffled=True the grouping is re-randomized
    `repeats` times and the error averaged. Classes with fewer images than
    the longest class are padded with already-scored images; only the first
    scoring of each image counts.
    """
    if any(len(idx) == 0 for idx in test_ds.class_indices):
        raise ValueError("balanced evaluation needs at least one test image per class")
    images = center_crop(test_ds.images, test_ds.crop)
    labels = test_ds.labels
    passes = repeats if shuffled else 1
    errors = []
    losses = []
    preds_out = None
    for rep in range(passes):
        order = []
        for idx in test_ds.class_indices:
            lst = idx.copy()
            if shuffled:
                rng.shuffle(lst)
            order.append(lst)
        count = max(len(lst) for lst in order)
        preds = np.full(len(labels), -1, dtype=np.int64)
        loss_sum = 0.0
        loss_n = 0
        for t in range(count):
            batch_idx = np.array([lst[t] if t < len(lst) else rng.choice(lst)
                                  for lst in order])
            logits, _ = network.forward(images[batch_idx], BnMode.EVAL_BATCH_STATS,
                                        need_cache=False)
            batch_loss, _, _ = softmax_xent(logits, labels[batch_idx])
            loss_sum += batch_loss * len(batch_idx)
            loss_n += len(batch_idx)
            batch_preds = logits.argmax(axis=1)
            fresh = preds[batch_idx] < 0
            preds[batch_idx[fresh]] = batch_preds[fresh]
        errors.append(float(np.mean(preds != labels)))
        losses.append(loss_sum / loss_n)
        preds_out = preds
    return EvalResult(float(np.mean(errors)), float(np.mean(losses)), preds_out)


@dataclass
class CirculationReport:
    visitor_kind: str
    theta: float
    base_indices: list
    base_classes: list
    visitor_indices: list
    visitor_classes: list
    visitor_standard_predictions: list
    steps: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def circulate(network, test_ds, visitor_kind="weak", visitor_count=1,
              theta=0.99, eval_batch=100, visitor_indices=None):
    """Replace member(s) of a high-confidence balanced batch with visitors.

    The base batch holds one theta-confident, correctly-classified image per
    class (confidence measured under standard inference). A weak visitor is
    a misclassified image; a strong visitor is another theta-confident one;
    explicit visitor_indices override the kind-based selection. Every step
    replaces one position (or a pair), runs batch-statistics inference, and
    records all predictions plus whether the visitors were assigned the
    missing class(es).
    """
    if visitor_indices is not None:
        visitor_count = len(visitor_indices)
    if visitor_count not in (1, 2):
        raise ValueError("visitor_count must be 1 or 2")
    std = eval_standard(network, test_ds, eval_batch)
    conf = std.probabilities.max(axis=1)
    labels = test_ds.labels
    c = test_ds.class_count
    base = []
    for cls in range(c):
        ok = np.flatnonzero((labels == cls) & (std.predictions == cls) & (conf >= theta))
        if len(ok) == 0:
            raise ValueError(f"cannot assemble a {theta}-confident base batch: "
                             f"class {cls} has no confident correct image")
        base.append(int(ok[np.argmax(conf[ok])]))
    base = np.array(base)
    if visitor_indices is not None:
        visitors = [int(v) for v in visitor_indices]
    else:
        if visitor_kind == "weak":
            # weak = the images the network is least sure about: misclassified,
            # taken in order of ascending confidence
            pool = np.flatnonzero(std.predictions != labels)
            if len(pool) < visitor_count:
                raise ValueError("not enough misclassified images for weak visitors")
            pool = pool[np.argsort(conf[pool], kind="stable")]
        elif visitor_kind == "strong":
            # strong = confidently correct and not already a resident, most
            # confident first
            pool = np.flatnonzero((std.predictions == labels) & (conf >= theta)
                                  & ~np.isin(np.arange(len(labels)), base))
            if len(pool) < visitor_count:
                raise ValueError("not enough confident images for strong visitors")
            pool = pool[np.argsort(-conf[pool], kind="stable")]
        else:
            raise ValueError(f"unknown visitor kind {visitor_kind!r}")
        visitors = [int(v) for v in pool[:visitor_count]]
    images = center_crop(test_ds.images, test_ds.crop)
    report = CirculationReport(
        visitor_kind=visitor_kind, theta=theta,
        base_indices=[int(i) for i in base],
        base_classes=list(range(c)),
        visitor_indices=list(visitors),
        visitor_classes=[int(labels[v]) for v in visitors],
        visitor_standard_predictions=[int(std.predictions[v]) for v in visitors])
    if visitor_count == 1:
        positions = [(p,) for p in range(c)]
    else:
        positions = [(p, q) for p in range(c) for q in range(p + 1, c)]
    hits = 0
    correct = 0
    stable = 0
    for pos in positions:
        batch_idx = base.copy()
        for slot, visitor in zip(pos, visitors):
            batch_idx[slot] = visitor
        logits, _ = network.forward(images[batch_idx], BnMode.EVAL_BATCH_STATS,
                                    need_cache=False)
        preds = logits.argmax(axis=1)
        # base slot s holds class s, so the classes stripped from the batch
        # are exactly the replaced positions
        missing = [int(p) for p in pos]
        visitor_preds = [int(preds[slot]) for slot in pos]
        resident_slots = [s for s in range(c) if s not in pos]
        residents_ok = all(int(preds[s]) == s for s in resident_slots)
        in_missing = set(visitor_preds) <= set(missing)
        visitor_correct = all(int(preds[slot]) == int(labels[v])
                              for slot, v in zip(pos, visitors))
        hits += in_missing
        correct += visitor_correct
        stable += residents_ok
        report.steps.append({
            "replaced_positions": list(pos),
            "replaced_classes": [int(p) for p in pos],
            "missing_classes": missing,
            "predictions": [int(p) for p in preds],
            "visitor_predictions": visitor_preds,
            "visitor_in_missing": in_missing,
            "visitor_correct": visitor_correct,
            "residents_stable": residents_ok,
        })
    n = len(positions)
    report.summary = {
        "steps": n,
        "missing_class_rate": hits / n,
        "visitor_correct_rate": correct / n,
        "residents_stable_rate": stable / n,
    }
    return report


@dataclass
class RebalanceReport:
    iterations: int
    rows: list = field(default_factory=list)  # {iteration, error_rate, changed}
    labels_per_iteration: list = field(default_factory=list)
    fixed_point_at: int = None

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def rebalance_iterate(network, test_ds, iterations, eval_batch=100):
    """Self-labelled rebalancing: start from standard-inference labels,
    group into batches balanced by PREDICTED class (overflow spills into
    extra passes with whatever classes remain), re-infer with batch
    statistics, adopt the new labels, repeat. Stops at a fixed point and
    repeats the final value for the remaining rows.
    """
    std = eval_standard(network, test_ds, eval_batch)
    labels = test_ds.labels
    images = center_crop(test_ds.images, test_ds.crop)
    current = std.predictions.copy()
    report = RebalanceReport(iterations=iterations)
    report.rows.append({"iteration": 0, "error_rate": std.error, "changed": int(len(labels))})
    report.labels_per_iteration.append([int(x) for x in current])
    for it in range(1, iterations + 1):
        queues = [list(np.flatnonzero(current == cls)) for cls in range(test_ds.class_count)]
        heads = [0] * len(queues)
        new = current.copy()
        while True:
            batch_idx = [queues[cls][heads[cls]] for cls in range(len(queues))
                         if heads[cls] < len(queues[cls])]
            if not batch_idx:
                break
            for cls in range(len(queues)):
                if heads[cls] < len(queues[cls]):
                    heads[cls] += 1
            batch_idx = np.array(batch_idx)
            logits, _ = network.forward(images[batch_idx], BnMode.EVAL_BATCH_STATS,
                                        need_cache=False)
            new[batch_idx] = logits.argmax(axis=1)
        changed = int(np.sum(new != current))
        error = float(np.mean(new != labels))
        report.rows.append({"iteration": it, "error_rate": error, "changed": changed})
        report.labels_per_iteration.append([int(x) for x in new])
        current = new
        if changed == 0:
            report.fixed_point_at = it
            for rest in range(it + 1, iterations + 1):
                report.rows.append({"iteration": rest, "error_rate": error, "changed": 0})
            break
    return report


def write_metrics_csv(rows, path):
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "protocol", "error_rate", "loss", "seconds"])
        for row in rows:
            writer.writerow([row.epoch, row.protocol, f"{row.error_rate:.6f}",
                             f"{row.loss:.6f}", f"{row.seconds:.6f}"])


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(MetricsRow(int(rec["epoch"]), rec["protocol"],
                                   float(rec["error_rate"]), float(rec["loss"]),
                                   float(rec["seconds"])))
    return rows


def write_json_report(obj, path):
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
