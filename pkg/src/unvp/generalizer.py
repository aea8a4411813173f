"""Distribution-aware hard-sample synthesis and the alternating training loop.

Training runs in three parts: the flow is first fitted alone by maximum
likelihood, then minimization epochs update classifier, flow and priors on
``CE - log p_X``, and ``K`` maximization phases, spread evenly after a
warm-up, push a random ``beta`` fraction of the training set uphill on
``CE - alpha * cost^2`` and add the results to a replayed pool.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .classifier import build_classifier, default_descriptor
from .config import GeneralizationConfig, RunConfig
from .flow import FlowModel
from .numeric import NumericError, Tensor, backward, cross_entropy, make_optimizer, no_grad
from .preprocessing import Preprocessor
from .priors import ClassPriorSet
from .rng import rng_for

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6


# --------------------------------------------------------------------------
# Gaussian summaries and the Bures-Wasserstein cost
# --------------------------------------------------------------------------


@dataclass
class GaussianSummary:
    mean: np.ndarray
    var: np.ndarray
    count: int = 1

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.maximum(np.asarray(self.var, dtype=np.float64), VAR_FLOOR)
        if self.mean.shape != self.var.shape:
            raise ValueError("mean and variance must have the same shape")
        if self.count < 1:
            raise ValueError("count must be >= 1")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(latents) -> GaussianSummary:
    z = np.asarray(latents, dtype=np.float64)
    if z.size == 0:
        raise ValueError("cannot fit a Gaussian to zero samples")
    z = z.reshape(len(z), -1)
    return GaussianSummary(z.mean(axis=0), z.var(axis=0), count=len(z))


def bures_cost_sq(a: GaussianSummary, b: GaussianSummary) -> float:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    mean_term = np.sum((a.mean - b.mean) ** 2)
    # diagonal covariances commute, so the trace term is elementwise
    var_term = np.sum((np.sqrt(a.var) - np.sqrt(b.var)) ** 2)
    return float(mean_term + var_term)


def bures_cost(a: GaussianSummary, b: GaussianSummary) -> float:
    """Wasserstein-2 distance between two diagonal Gaussians."""
    return float(np.sqrt(bures_cost_sq(a, b)))


def _bures_sq_tensor(z: Tensor, ref: GaussianSummary, with_var: bool) -> Tensor:
    mean = z.mean(axis=0)
    diff = mean - ref.mean
    cost = (diff * diff).sum()
    if with_var:
        centered = z - mean
        var = (centered * centered).mean(axis=0).maximum(VAR_FLOOR)
        gap = var.sqrt() - np.sqrt(ref.var)
        cost = cost + (gap * gap).sum()
    return cost


def regularized_cost(
    x_batch,
    c: int,
    flow: FlowModel,
    priors: ClassPriorSet | None,
    clf,
    source_summary: GaussianSummary | None,
    source_features,
    feature_reg_weight: float = 1.0,
    min_group: int = 4,
    *,
    latents: Tensor | None = None,
    features: Tensor | None = None,
) -> Tensor:
    """Squared latent Bures cost of a same-class batch plus the feature-drift term.

    ``source_summary=None`` compares against the class prior instead. Batches
    smaller than ``min_group`` drop the variance part of the Bures term.
    """
    x = x_batch if isinstance(x_batch, Tensor) else Tensor(x_batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if source_summary is None:
        if priors is None:
            raise ValueError("need a source summary or priors")
        mu, var = priors.prior_params(c)
        source_summary = GaussianSummary(mu.data[0], var.data[0])
    z = latents if latents is not None else flow.forward(x)[0]
    cost = _bures_sq_tensor(z, source_summary, with_var=x.shape[0] >= min_group)
    if feature_reg_weight:
        feats = features if features is not None else clf.forward(x)[1]
        d = feats - np.asarray(source_features)
        cost = cost + (d * d).sum(axis=1).mean() * feature_reg_weight
    return cost


# --------------------------------------------------------------------------
# Hard-sample synthesis
# --------------------------------------------------------------------------


@dataclass
class HardSamplePool:
    inputs: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    rounds: list = field(default_factory=list)

    def add(self, x: np.ndarray, c: np.ndarray, round_index: int) -> None:
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("hard samples must be finite")
        if len(x):
            self.inputs.append(x)
            self.labels.append(np.asarray(c, dtype=np.int64))
            self.rounds.append(np.full(len(x), round_index, dtype=np.int64))

    def __len__(self) -> int:
        return int(sum(len(x) for x in self.inputs))

    def arrays(self, dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.inputs:
            return np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.concatenate(self.inputs), np.concatenate(self.labels), np.concatenate(self.rounds)


@dataclass
class SynthesisResult:
    x: np.ndarray
    labels: np.ndarray
    source_index: np.ndarray
    traces: list  # one objective trace per class group


def _ascent_objective(x_arr, c, flow, clf, cfg: GeneralizationConfig, summary, f0, priors, need_grad: bool):
    m = len(x_arr)
    x = Tensor(x_arr, requires_grad=need_grad)
    logits, feats = clf.forward(x)
    ce = cross_entropy(logits, np.full(m, c), reduction="sum")
    if cfg.alpha:
        reg = regularized_cost(
            x, c, flow, priors, clf, summary, f0, cfg.feature_reg_weight, cfg.min_group, features=feats
        )
        obj = ce - reg * (cfg.alpha * m)
    else:
        obj = ce
    if not need_grad:
        return obj.item(), None
    grads = backward(obj, accumulate=False)  # model parameters stay untouched
    return obj.item(), grads.get(x, np.zeros_like(x_arr))


def _ascend_group(x0, c, flow, priors, clf, cfg: GeneralizationConfig):
    """Gradient ascent with step halving; returns (x, trace of mean objective).

    A step is only taken if it does not lower the objective, so every trace
    is non-decreasing. With ``ascent="normalized"`` each sample moves at most
    ``eta_adv`` (L2, preprocessed scale) per step.
    """
    m = len(x0)
    with no_grad():
        f0 = clf.forward(x0)[1].data
        summary = fit_gaussian(flow.encode(x0)) if cfg.source_summary == "batch" else None
    x = x0.copy()
    obj, g = _ascent_objective(x, c, flow, clf, cfg, summary, f0, priors, True)
    trace = [obj / m]
    for _ in range(cfg.T_max):
        step = cfg.eta_adv
        direction = g
        if cfg.ascent == "normalized":
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            direction = np.divide(g, norms, out=np.zeros_like(g), where=norms > 0)
        for _ in range(cfg.max_halvings + 1):
            cand = np.clip(x + step * direction, -0.5, 0.5)
            try:
                cand_obj, cand_g = _ascent_objective(cand, c, flow, clf, cfg, summary, f0, priors, True)
            except NumericError:
                cand_obj = -np.inf
            if cand_obj >= obj:
                x, obj, g = cand, cand_obj, cand_g
                break
            step *= 0.5
        trace.append(obj / m)
    return x, trace


def synthesize_hard_samples(x_src, labels, flow, priors, clf, cfg: GeneralizationConfig, chunk: int = 128) -> SynthesisResult:
    """Perturb preprocessed ``x_src`` class by class, with all model parameters frozen."""
    x_src = np.asarray(x_src, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    out_x, out_y, out_idx, traces = [], [], [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        for start in range(0, len(idx), chunk):
            sel = idx[start : start + chunk]
            if cfg.T_max == 0:
                xs, trace = x_src[sel].copy(), []
            else:
                try:
                    xs, trace = _ascend_group(x_src[sel], int(c), flow, priors, clf, cfg)
                except NumericError as exc:
                    log.warning("ascent for class %d discarded: %s", c, exc)
                    continue
            if not np.all(np.isfinite(xs)):
                log.warning("ascent for class %d produced non-finite samples; discarded", c)
                continue
            out_x.append(xs)
            out_y.append(np.full(len(sel), c))
            out_idx.append(sel)
            traces.append(trace)
    dim = x_src.shape[1] if x_src.ndim == 2 else 0
    if not out_x:
        return SynthesisResult(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), traces)
    return SynthesisResult(np.concatenate(out_x), np.concatenate(out_y), np.concatenate(out_idx), traces)


# --------------------------------------------------------------------------
# Training state and schedule
# --------------------------------------------------------------------------


class TrainingAborted(RuntimeError):
    """A numeric failure stopped training; state holds the last good epoch."""


@dataclass
class TrainState:
    config: RunConfig
    input_shape: tuple
    n_classes: int
    preprocessor: Preprocessor
    clf: object
    flow: FlowModel | None = None
    priors: ClassPriorSet | None = None
    opt_clf: object = None
    opt_flow: object = None
    pool: HardSamplePool = field(default_factory=HardSamplePool)
    pretrain_done: int = 0
    epoch: int = 0
    phases_done: int = 0
    history: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(np.prod(self.input_shape))

    @classmethod
    def create(cls, config: RunConfig, input_shape, n_classes: int, preprocessor: Preprocessor | None = None) -> "TrainState":
        input_shape = tuple(int(s) for s in np.atleast_1d(input_shape))
        descriptor = default_descriptor(input_shape, n_classes)
        if config.clf_hidden and descriptor["kind"] == "mlp":
            descriptor["hidden"] = [int(h) for h in str(config.clf_hidden).split(",")]
        clf = build_classifier(descriptor, rng_for(config.seed, "classifier"))
        state = cls(config, input_shape, n_classes, preprocessor or Preprocessor(), clf)
        state.opt_clf = make_optimizer(config.optimizer, clf.parameters(), config.lr)
        if config.flow_enabled:
            state.flow = FlowModel(
                input_shape,
                n_blocks=config.flow_blocks,
                hidden=config.flow_hidden,
                n_res_blocks=config.flow_res_blocks,
                clamp=config.flow_clamp,
                rng=rng_for(config.seed, "flow"),
                preprocessor=state.preprocessor,
            )
            state.priors = ClassPriorSet(
                n_classes,
                state.dim,
                mode=config.mode,
                gamma=config.gamma,
                lam=config.lam,
                noise_dim=config.noise_dim,
                rng=rng_for(config.seed, "priors"),
            )
            state.opt_flow = make_optimizer(config.optimizer, state.flow_parameters(), config.flow_lr or config.lr)
        return state

    def flow_parameters(self) -> list:
        if self.flow is None:
            return []
        return self.flow.parameters() + self.priors.parameters()

    def snapshot(self):
        return (
            [p.data.copy() for p in self.clf.parameters() + self.flow_parameters()],
            copy.deepcopy(self.opt_clf.__dict__ | {"params": None}),
            copy.deepcopy(self.opt_flow.__dict__ | {"params": None}) if self.opt_flow else None,
        )

    def restore(self, snap) -> None:
        values, oc, of = snap
        for p, v in zip(self.clf.parameters() + self.flow_parameters(), values):
            p.data[...] = v
        for opt, saved in ((self.opt_clf, oc), (self.opt_flow, of)):
            if saved is not None:
                params = opt.params
                opt.__dict__.update(saved)
                opt.params = params


def phase_epochs(epochs: int, K: int) -> list[int]:
    """Minimization-epoch counts after which each maximization phase runs.

    A warm-up of two cycles precedes the first phase; phases are one cycle apart.
    """
    if K <= 0:
        return []
    cycle = max(1, epochs // (K + 2))
    return [min(epochs, 2 * cycle + i * cycle) for i in range(K)]


def _flow_nll(state: TrainState, xb: np.ndarray, yb: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Mean negative log-likelihood of raw-scale data, dequantized with ``rng``."""
    x = xb + state.preprocessor.dequantize_noise(xb.shape, rng)
    z, logdet = state.flow.forward(x)
    n = state.priors.sample_noise(rng) if state.priors.mode == "eunvp" else None
    logp = state.priors.log_prob(z, yb, n) + logdet
    return -logp.mean() - state.preprocessor.logdet(state.dim)


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i : i + batch]


def pretrain_epoch(state: TrainState, x: np.ndarray, y: np.ndarray) -> dict:
    """One pass maximizing the flow likelihood alone."""
    cfg = state.config
    e = state.pretrain_done
    if not state.flow.initialized:
        first = next(_batches(len(x), cfg.batch, rng_for(cfg.seed, "pretrain", e)))
        xb = x[first] + state.preprocessor.dequantize_noise(x[first].shape, rng_for(cfg.seed, "actnorm"))
        state.flow.initialize(xb)
    noise_rng = rng_for(cfg.seed, "pretrain-noise", e)
    total, count = 0.0, 0
    snap = state.snapshot()
    try:
        for idx in _batches(len(x), cfg.batch, rng_for(cfg.seed, "pretrain", e)):
            nll = _flow_nll(state, x[idx], y[idx], noise_rng)
            backward(nll)
            state.opt_flow.step()
            state.opt_flow.zero_grad()
            total += nll.item() * len(idx)
            count += len(idx)
    except (NumericError, ValueError) as exc:
        state.restore(snap)
        raise TrainingAborted(f"pretraining epoch {e} failed: {exc}") from exc
    state.pretrain_done += 1
    return {"pretrain_epoch": state.pretrain_done, "nll": total / max(count, 1)}


def minimization_epoch(state: TrainState, x: np.ndarray, y: np.ndarray) -> dict:
    """One pass of ``CE - log p_X`` over training data plus the hard-sample pool."""
    cfg = state.config
    px, py, _ = state.pool.arrays(state.dim)
    xs = np.concatenate([x, px]) if len(px) else x
    ys = np.concatenate([y, py]) if len(py) else y
    e = state.epoch
    noise_rng = rng_for(cfg.seed, "min-noise", e)
    sums = {"ce": 0.0, "nll": 0.0, "correct": 0}
    snap = state.snapshot()
    try:
        for idx in _batches(len(xs), cfg.batch, rng_for(cfg.seed, "shuffle", e)):
            xb, yb = xs[idx], ys[idx]
            logits, _ = state.clf.forward(xb)
            ce = cross_entropy(logits, yb)
            loss = ce
            if state.flow is not None:
                nll = _flow_nll(state, xb, yb, noise_rng)
                loss = ce + nll
                sums["nll"] += nll.item() * len(idx)
            backward(loss)
            state.opt_clf.step()
            state.opt_clf.zero_grad()
            if state.flow is not None:
                state.opt_flow.step()
                state.opt_flow.zero_grad()
            sums["ce"] += ce.item() * len(idx)
            sums["correct"] += int(np.sum(logits.data.argmax(axis=1) == yb))
    except (NumericError, ValueError) as exc:
        state.restore(snap)
        raise TrainingAborted(f"minimization epoch {e} failed: {exc}") from exc
    state.epoch += 1
    n = len(xs)
    return {
        "ce": sums["ce"] / n,
        "nll": sums["nll"] / n if state.flow is not None else None,
        "acc": sums["correct"] / n,
    }


def maximization_phase(state: TrainState, x: np.ndarray, y: np.ndarray) -> SynthesisResult:
    """Perturb a random ``beta`` fraction of the training set and grow the pool."""
    gcfg = state.config.generalization()
    r = state.phases_done
    n_select = int(round(gcfg.beta * len(x)))
    rng = rng_for(state.config.seed, "select", r)
    chosen = np.sort(rng.choice(len(x), size=n_select, replace=False)) if n_select else np.zeros(0, dtype=np.int64)
    result = synthesize_hard_samples(x[chosen], y[chosen], state.flow, state.priors, state.clf, gcfg, chunk=state.config.batch)
    result.source_index = chosen[result.source_index]
    state.pool.add(result.x, result.labels, r)
    state.phases_done += 1
    return result


def train(state: TrainState, x: np.ndarray, y: np.ndarray, callback=None, evaluate=None) -> TrainState:
    """Run (or resume) the full schedule on preprocessed training data.

    ``callback(state, record)`` fires after every epoch; ``evaluate(state)``
    may return extra metrics merged into each record.
    """
    cfg = state.config
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if state.flow is not None:
        while state.pretrain_done < cfg.pretrain_epochs:
            rec = pretrain_epoch(state, x, y)
            if callback:
                callback(state, {"phase": "pretrain", **rec})
    gcfg = cfg.generalization()
    schedule = phase_epochs(cfg.epochs, gcfg.K) if state.flow is not None else []
    while state.epoch < cfg.epochs:
        stats = minimization_epoch(state, x, y)
        grown = 0
        while state.phases_done < len(schedule) and state.epoch >= schedule[state.phases_done]:
            grown += len(maximization_phase(state, x, y).x)
        record = {
            "epoch": state.epoch,
            "ce": stats["ce"],
            "nll": stats["nll"],
            "acc_train": stats["acc"],
            "pool_size": len(state.pool),
            "pool_growth": grown,
        }
        if evaluate:
            record.update(evaluate(state))
        state.history.append(record)
        if callback:
            callback(state, record)
    return state
