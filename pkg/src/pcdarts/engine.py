"""First-order alternating search: SGD on weights, Adam on architecture."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as data_mod
from .genotype import Genotype, derive, jaccard
from .ops import OPS
from .search_space import ArchParams, SuperNet
from .tensor import (
    SGD,
    Adam,
    NumericalError,
    Tensor,
    activation_peak,
    backward,
    clear_tape,
    cosine_lr,
    default_dtype,
    default_dtype_as,
    no_grad,
    reset_activation_peak,
    zero_grads,
)
from .tensor import checkpoint


@dataclass
class SearchConfig:
    K: int = 4
    nodes: int = 6
    layers: int = 8
    C0: int = 16
    epochs: int = 50
    warm_up_epochs: int = 15
    batch_size: int = 256
    w_lr: float = 0.1
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    a_lr: float = 6e-4
    a_betas: tuple = (0.5, 0.999)
    a_weight_decay: float = 1e-3
    seed: int = 0
    partial_channel: bool = True
    edge_normalization: bool = True
    mask_mode: str = "efficient"
    ops: tuple = OPS
    stem_multiplier: int = 3
    bn_affine: bool = False
    dtype: str = "float32"
    keep_zero: bool = False
    derive_score: str = "max"
    augment: bool = False
    augment_pad: int = 4

    def __post_init__(self):
        self.a_betas = tuple(self.a_betas)
        self.ops = tuple(self.ops)
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warm_up_epochs < self.epochs:
            raise ValueError(f"warm_up_epochs must lie in [0, epochs), got {self.warm_up_epochs} "
                             f"with epochs={self.epochs}")
        if self.nodes < 3:
            raise ValueError(f"nodes must be >= 3, got {self.nodes}")
        if self.layers < 1 or self.C0 < 1 or self.batch_size < 1:
            raise ValueError("layers, C0 and batch_size must be positive")
        if self.mask_mode not in ("efficient", "random"):
            raise ValueError(f"mask_mode must be 'efficient' or 'random', got {self.mask_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        unknown = [o for o in self.ops if o not in OPS]
        if unknown or len(set(self.ops)) != len(self.ops):
            raise ValueError(f"ops must be distinct names from {OPS}, got {self.ops}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["a_betas"] = list(self.a_betas)
        d["ops"] = list(self.ops)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise KeyError(f"unknown search settings: {', '.join(extra)}")
        return cls(**d)

    def replace(self, **changes) -> "SearchConfig":
        d = self.to_dict()
        d.update(changes)
        return SearchConfig.from_dict(d)


@dataclass
class EpochRecord:
    epoch: int
    w_loss: float
    w_acc: float
    a_loss: float
    a_acc: float
    lr: float
    peak_act_elems: int
    seconds: float
    genotype: Genotype = None
    arch_sha1: str = ""


CSV_COLUMNS = ("epoch", "w_loss", "w_acc", "a_loss", "a_acc", "lr", "peak_act_elems", "seconds")


@dataclass
class SearchLog:
    records: list = field(default_factory=list)
    w_steps: int = 0
    a_steps: int = 0

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, f"{r.w_loss:.6f}", f"{r.w_acc:.6f}", f"{r.a_loss:.6f}", f"{r.a_acc:.6f}",
                        f"{r.lr:.8g}", r.peak_act_elems, f"{r.seconds:.3f}"])
        return buf.getvalue()

    def genotypes_json(self) -> str:
        snaps = [{"epoch": r.epoch, "arch_sha1": r.arch_sha1, "genotype": json.loads(r.genotype.to_json())}
                 for r in self.records if r.genotype is not None]
        return json.dumps(snaps, indent=1) + "\n"


@dataclass
class StepMetrics:
    w_loss: float
    w_acc: float
    a_loss: float | None = None
    a_acc: float | None = None


class SearchDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the last good state."""

    def __init__(self, epoch, step, cause, weights, arch, log):
        super().__init__(f"search diverged at epoch {epoch}, step {step}: {cause}")
        self.epoch, self.step = epoch, step
        self.weights, self.arch, self.log = weights, arch, log


def _accuracy(logits, y):
    out = logits.data
    if out.ndim != 2 or not np.issubdtype(np.asarray(y).dtype, np.integer):
        return float("nan")
    return float((out.argmax(axis=1) == y).mean())


def _as_input(x):
    return Tensor(np.ascontiguousarray(x, dtype=default_dtype()))


def _finite(loss, where):
    v = float(loss.data)
    if not math.isfinite(v):
        raise NumericalError(f"{where} loss", -1)
    return v


def alternating_step(model, w_batch, a_batch, epoch, *, w_opt, a_opt, lr, warm_up_epochs=0) -> StepMetrics:
    """One weight update on ``w_batch``; one arch update on ``a_batch`` unless warming up.

    ``model`` needs ``weights()``, ``arch_parameters()`` and ``loss(x, y) ->
    (loss, output)``.  Each update only touches its own parameter group;
    gradients are cleared explicitly around both passes.
    """
    weights, arch = model.weights(), model.arch_parameters()
    zero_grads(weights + arch)
    xw, yw = w_batch
    loss, out = model.loss(_as_input(xw), yw)
    metrics = StepMetrics(_finite(loss, "weight-split"), _accuracy(out, yw))
    backward(loss)
    w_opt.step(lr)
    zero_grads(weights + arch)
    if epoch >= warm_up_epochs:
        xa, ya = a_batch
        loss, out = model.loss(_as_input(xa), ya)
        metrics.a_loss, metrics.a_acc = _finite(loss, "arch-split"), _accuracy(out, ya)
        backward(loss)
        a_opt.step()
        zero_grads(weights + arch)
    return metrics


def build_supernet(config: SearchConfig, classes: int, in_channels: int = 3) -> SuperNet:
    return SuperNet(config.C0, classes, config.layers, config.nodes, config.K, config.ops,
                    partial_channel=config.partial_channel, edge_normalization=config.edge_normalization,
                    mask_mode=config.mask_mode, stem_multiplier=config.stem_multiplier,
                    affine=config.bn_affine, in_channels=in_channels, seed=config.seed)


def make_optimizers(net, config: SearchConfig):
    w_opt = SGD(net.weights(), config.w_lr, config.w_momentum, config.w_weight_decay)
    a_opt = Adam(net.arch_parameters(), config.a_lr, config.a_betas, config.a_weight_decay)
    return w_opt, a_opt


def evaluate(net, dataset, indices, batch_size):
    """Mean loss and accuracy over ``indices`` with BN in inference mode."""
    net.eval()
    total_loss = correct = seen = 0
    try:
        with no_grad():
            for k in range(0, len(indices), batch_size):
                take = indices[k:k + batch_size]
                y = dataset.labels[take]
                loss, out = net.loss(_as_input(dataset.images[take]), y)
                total_loss += float(loss.data) * len(take)
                correct += int((out.data.argmax(axis=1) == y).sum())
                seen += len(take)
    finally:
        net.train()
    return total_loss / seen, correct / seen


def weight_state(net) -> dict:
    return {k: np.array(v) for k, v in net.state_dict().items()}


def derive_genotype(arch: ArchParams, config: SearchConfig) -> Genotype:
    return derive(arch, config.nodes, config.edge_normalization, config.keep_zero, config.derive_score)


def run_search(config: SearchConfig, dataset, progress=None):
    """Search on ``dataset``; returns (ArchParams, SearchLog, weight state dict).

    The training data is split into equal halves: weights learn on one,
    architecture parameters on the other.  Architecture updates start after
    ``warm_up_epochs``.  The weight learning rate follows a per-step cosine
    schedule that reaches zero on the final step.
    """
    with default_dtype_as(config.dtype):
        return _run_search(config, dataset, progress)


def _run_search(config, dataset, progress):
    bs = config.batch_size
    if len(dataset) < 2 * bs:
        raise ValueError(f"dataset of {len(dataset)} examples is smaller than two batches of {bs}")
    plan = data_mod.split_half(dataset, config.seed)
    n_batches = data_mod.batch_count(plan, "w", bs)
    total = config.epochs * n_batches
    net = build_supernet(config, dataset.classes, dataset.shape[0])
    w_opt, a_opt = make_optimizers(net, config)
    log = SearchLog()
    good = (weight_state(net), net.arch.copy())
    step = 0
    clear_tape()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        reset_activation_peak()
        w_loss = w_acc = 0.0
        lr = config.w_lr
        w_stream = data_mod.batches(dataset, plan, "w", bs, epoch, config.augment, config.augment_pad)
        a_stream = data_mod.batches(dataset, plan, "a", bs, epoch, config.augment, config.augment_pad)
        for k, (wb, ab) in enumerate(zip(w_stream, a_stream)):
            lr = cosine_lr(step, max(total - 1, 1), config.w_lr)
            try:
                m = alternating_step(net, wb, ab, epoch, w_opt=w_opt, a_opt=a_opt, lr=lr,
                                     warm_up_epochs=config.warm_up_epochs)
            except NumericalError as exc:
                clear_tape()
                log.w_steps, log.a_steps = w_opt.steps, a_opt.steps
                raise SearchDiverged(epoch, k, exc, good[0], good[1], log) from exc
            w_loss += m.w_loss
            w_acc += m.w_acc
            step += 1
        a_loss, a_acc = evaluate(net, dataset, plan.a, bs)
        if not math.isfinite(a_loss):
            log.w_steps, log.a_steps = w_opt.steps, a_opt.steps
            raise SearchDiverged(epoch, n_batches, "non-finite arch-split loss", good[0], good[1], log)
        rec = EpochRecord(epoch, w_loss / n_batches, w_acc / n_batches, a_loss, a_acc, lr,
                          activation_peak("mixed_op"), time.perf_counter() - t0,
                          derive_genotype(net.arch, config), arch_digest(net.arch))
        log.append(rec)
        good = (weight_state(net), net.arch.copy())
        if progress is not None:
            progress(rec, net)
    log.w_steps, log.a_steps = w_opt.steps, a_opt.steps
    return net.arch, log, good[0]


def arch_digest(arch: ArchParams) -> str:
    """SHA-1 of the serialized arch tensors; equal digests mean bit-equal values."""
    return hashlib.sha1(checkpoint.dumps(arch.tensors())).hexdigest()


def write_checkpoints(out_dir, weights: dict, arch: ArchParams):
    checkpoint.save(os.path.join(out_dir, "weights.pcnt"), weights)
    checkpoint.save(os.path.join(out_dir, "arch.pcnt"), arch.tensors())


# ----------------------------------------------------------------------------
# seed sweeps

@dataclass
class RunSummary:
    seed: int
    genotype: Genotype
    a_acc: float
    w_acc: float
    peak_act_elems: int
    seconds: float
    log_csv: str = ""

    def row(self):
        return {"seed": self.seed, "a_acc": self.a_acc, "w_acc": self.w_acc,
                "peak_act_elems": self.peak_act_elems, "seconds": self.seconds}


def run_one(config: SearchConfig, dataset) -> RunSummary:
    t0 = time.perf_counter()
    arch, log, _ = run_search(config, dataset)
    final = log.final
    return RunSummary(config.seed, derive_genotype(arch, config), final.a_acc, final.w_acc,
                      max(r.peak_act_elems for r in log.records), time.perf_counter() - t0, log.to_csv())


def _run_one_packed(args):
    config_dict, dataset = args
    return run_one(SearchConfig.from_dict(config_dict), dataset)


def run_many(configs, dataset, jobs=1) -> list:
    """Run independent searches, in worker processes when ``jobs > 1``; order is preserved."""
    if jobs <= 1 or len(configs) <= 1:
        return [run_one(c, dataset) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one_packed, [(c.to_dict(), dataset) for c in configs]))


@dataclass
class Dispersion:
    runs: list
    jaccard: np.ndarray

    @property
    def mean_jaccard(self) -> float:
        n = len(self.runs)
        if n < 2:
            return 1.0
        iu = np.triu_indices(n, 1)
        return float(self.jaccard[iu].mean())

    def to_dict(self) -> dict:
        acc = np.array([r.a_acc for r in self.runs])
        return {
            "runs": [dict(r.row(), genotype=json.loads(r.genotype.to_json())) for r in self.runs],
            "jaccard": self.jaccard.round(6).tolist(),
            "mean_pairwise_jaccard": round(self.mean_jaccard, 6),
            "a_acc_mean": float(acc.mean()),
            "a_acc_std": float(acc.std()),
            "a_acc_min": float(acc.min()),
            "a_acc_max": float(acc.max()),
        }


def dispersion(runs) -> Dispersion:
    n = len(runs)
    J = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            J[i, j] = J[j, i] = jaccard(runs[i].genotype, runs[j].genotype)
    return Dispersion(list(runs), J)


def seed_sweep(config: SearchConfig, dataset, seeds, jobs=1) -> Dispersion:
    """Identical searches differing only in seed, with genotype agreement statistics."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("a seed sweep needs at least two seeds")
    return dispersion(run_many([config.replace(seed=s) for s in seeds], dataset, jobs))
