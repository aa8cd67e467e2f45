"""Training procedures: BPR pretraining, untargeted adversarial training, and
its coordinated variant that aligns cross-modal perturbation gradients.

Each adversarial step runs two phases over one sampled batch. The max phase
freezes the parameters, differentiates the perturbed ranking loss with respect
to per-item feature deltas (in create-graph mode when the alignment weight is
positive, because the alignment term is a function of those gradients), and
assigns each delta to its budget sphere along the normalised gradient. The min
phase treats the deltas as constants and takes one optimiser step on
clean loss + lambda * perturbed loss + beta * squared parameter norm.
With alpha = 0 the max phase skips the alignment term entirely, so the
coordinated variant degenerates to plain untargeted adversarial training
batch for batch; with lambda = 0 the min phase reduces to the pretraining
step the same way.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import DataError, TripleSampler
from .metrics import recall_ndcg
from .models import Forward


class NumericalError(RuntimeError):
    """Training aborted on a non-finite loss or gradient."""


@dataclass
class DefenseConfig:
    mode: str = "uat_mc"  # uat | uat_mc (alpha forced to 0 under uat)
    lambda_: float = 1.0
    alpha: float = 1.0
    beta: float = 1e-4
    eta: float = 0.05
    eps_d_pct: float = 0.10
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    eval_every: int = 1
    eval_k: int = 10
    optimizer: str = "sgd"  # sgd | adam
    reduction: str = "sum"  # sum | mean
    second_order: str = "tape"  # tape | fd (finite-difference cross-check route)
    seed: int = 0
    wall_clock: bool = False  # record real seconds in the log

    def __post_init__(self):
        if self.mode not in ("uat", "uat_mc"):
            raise DataError(f"unknown defense mode {self.mode!r}")
        if self.lambda_ < 0 or self.alpha < 0 or self.beta < 0:
            raise DataError("lambda, alpha and beta must be non-negative")
        if self.eta <= 0:
            raise DataError("learning rate must be positive")
        if not 0.0 < self.eps_d_pct <= 1.0:
            raise DataError("eps_d_pct must lie in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")
        if self.reduction not in ("sum", "mean"):
            raise DataError(f"unknown reduction {self.reduction!r}")
        if self.second_order not in ("tape", "fd"):
            raise DataError(f"unknown second-order mode {self.second_order!r}")

    @property
    def effective_alpha(self):
        return 0.0 if self.mode == "uat" else self.alpha


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, clean_loss, adv_loss, align_mean, val_recall, seconds):
        self.rows.append({"epoch": epoch, "clean_loss": clean_loss,
                          "adv_loss": adv_loss, "align_mean": align_mean,
                          "val_recall10": val_recall, "seconds": seconds})

    @property
    def epochs(self):
        return len(self.rows)


@dataclass
class DeltaBatch:
    """Per-triple feature perturbations for the positive and negative items."""
    dv_pos: np.ndarray
    dt_pos: np.ndarray
    dv_neg: np.ndarray
    dt_neg: np.ndarray


# ---------------------------------------------------------------------------
# losses

def bpr_loss(params, enc, triples, forward=None, reduction="sum"):
    """Pairwise ranking loss sum(-ln sigmoid(pos - neg)) over the batch."""
    return adversarial_bpr_loss(params, enc, triples, None,
                                forward=forward, reduction=reduction)


def adversarial_bpr_loss(params, enc, triples, deltas, forward=None,
                         reduction="sum", delta_nodes=None):
    """Ranking loss over perturbation-aware encodings.

    ``deltas`` is a DeltaBatch of arrays (or None for the clean loss);
    ``delta_nodes`` overrides them with graph leaves when the caller needs
    gradients with respect to the perturbations.
    """
    users, pos, neg = triples
    fw = forward if forward is not None else Forward(params, enc)
    nodes = delta_nodes
    if nodes is None and deltas is not None:
        nodes = {k: ad.constant(v) for k, v in vars(deltas).items()}
    h_u = fw.user_embedding_batch(users)
    if nodes is None:
        h_p = fw.item_embedding_batch(pos)
        h_n = fw.item_embedding_batch(neg)
    else:
        h_p = fw.item_embedding_batch(pos, nodes["dv_pos"], nodes["dt_pos"])
        h_n = fw.item_embedding_batch(neg, nodes["dv_neg"], nodes["dt_neg"])
    margins = ad.sub(ad.sum_rows(ad.mul(h_u, h_p)), ad.sum_rows(ad.mul(h_u, h_n)))
    loss = ad.sum_all(ad.softplus(ad.neg(margins)))
    if reduction == "mean":
        loss = ad.mul(ad.constant(1.0 / len(users)), loss)
    return loss


def _reg_loss(fw):
    total = None
    for name in fw.param_names():
        p = fw.nodes[name]
        term = ad.sum_all(ad.mul(p, p))
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# phases

def _budget_rows(feats, items, eps_pct):
    norms = np.linalg.norm(feats.values[items], axis=1)
    return eps_pct * norms


_DELTA_KEYS = ("dv_pos", "dt_pos", "dv_neg", "dt_neg")


def _zero_delta_nodes(batch_size, feats_v, feats_t, at=None):
    dims = {"dv_pos": feats_v.dim, "dt_pos": feats_t.dim,
            "dv_neg": feats_v.dim, "dt_neg": feats_t.dim}
    values = at or {}
    return {k: ad.leaf(values.get(k, np.zeros((batch_size, dims[k]))))
            for k in _DELTA_KEYS}


def _max_objective(params, enc, triples, config, fw, nodes):
    """The max-phase objective: perturbed loss plus the weighted alignment
    term, which is built from create-graph gradients of the perturbed loss."""
    alpha = config.effective_alpha
    leaves = [nodes[k] for k in _DELTA_KEYS]
    adv = adversarial_bpr_loss(params, enc, triples, None, forward=fw,
                               reduction=config.reduction, delta_nodes=nodes)
    if alpha == 0:
        return adv, adv, None
    if nodes["dv_pos"].shape[1] != nodes["dt_pos"].shape[1]:
        raise DataError("gradient alignment requires equal modality dims")
    gvp, gtp, gvn, gtn = ad.grad(adv, leaves, create_graph=True)
    align = ad.add(ad.cosine(ad.sum_cols(gvp), ad.sum_cols(gtp)),
                   ad.cosine(ad.sum_cols(gvn), ad.sum_cols(gtn)))
    objective = ad.add(adv, ad.mul(ad.constant(alpha), align))
    return objective, adv, align


def max_phase_gradients(params, enc, triples, config, feats_v, feats_t,
                        forward=None, at=None):
    """Raw gradients of the max-phase objective w.r.t. the four delta blocks.

    config.second_order == "fd" replaces the tape route with central finite
    differences of the whole objective, an independent cross-check.
    Returns (dict key -> gradient array, alignment value).
    """
    users, _, _ = triples
    B = len(users)
    fw = forward if forward is not None else Forward(params, enc)
    nodes = _zero_delta_nodes(B, feats_v, feats_t, at=at)
    objective, _, align = _max_objective(params, enc, triples, config, fw, nodes)
    align_value = align.item() if align is not None else 0.0
    if config.second_order == "fd" and config.effective_alpha > 0:
        grads = _fd_objective_gradients(params, enc, triples, config, fw, nodes)
    else:
        grads = {k: g.numpy() for k, g in
                 zip(_DELTA_KEYS, ad.grad(objective, [nodes[k] for k in _DELTA_KEYS]))}
    return grads, align_value


def _fd_objective_gradients(params, enc, triples, config, fw, nodes, step=1e-5):
    def value(arrays):
        trial = {k: ad.leaf(v) for k, v in arrays.items()}
        obj, _, _ = _max_objective(params, enc, triples, config, fw, trial)
        return obj.item()

    base = {k: nodes[k].numpy().copy() for k in _DELTA_KEYS}
    grads = {}
    for key in _DELTA_KEYS:
        g = np.zeros_like(base[key])
        flat = base[key].reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = value(base)
            flat[j] = orig - step
            down = value(base)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * step)
        grads[key] = g
    return grads


def alignment_gradients(params, enc, triples, feats_v, feats_t, reduction="sum",
                        at=None, forward=None):
    """Value and delta-gradients of the alignment term alone (both cosines).

    Useful for probing the linear-fusion degeneracy: with an identity
    nonlinearity and batch size 1 the per-triple gradients share one scalar,
    so the cosines are invariant in the deltas and these gradients vanish.
    """
    users, _, _ = triples
    fw = forward if forward is not None else Forward(params, enc)
    nodes = _zero_delta_nodes(len(users), feats_v, feats_t, at=at)
    leaves = [nodes[k] for k in _DELTA_KEYS]
    adv = adversarial_bpr_loss(params, enc, triples, None, forward=fw,
                               reduction=reduction, delta_nodes=nodes)
    gvp, gtp, gvn, gtn = ad.grad(adv, leaves, create_graph=True)
    align = ad.add(ad.cosine(ad.sum_cols(gvp), ad.sum_cols(gtp)),
                   ad.cosine(ad.sum_cols(gvn), ad.sum_cols(gtn)))
    grads = ad.grad(align, leaves)
    return {k: g.numpy() for k, g in zip(_DELTA_KEYS, grads)}, align.item()


def max_phase(params, enc, triples, config, feats_v, feats_t, forward=None):
    """Generate budget-sphere perturbations for the batch; returns
    (DeltaBatch, alignment value). Parameters stay frozen."""
    _, pos, neg = triples
    grads, align_value = max_phase_gradients(params, enc, triples, config,
                                             feats_v, feats_t, forward=forward)
    eps = {
        "dv_pos": _budget_rows(feats_v, pos, config.eps_d_pct),
        "dt_pos": _budget_rows(feats_t, pos, config.eps_d_pct),
        "dv_neg": _budget_rows(feats_v, neg, config.eps_d_pct),
        "dt_neg": _budget_rows(feats_t, neg, config.eps_d_pct),
    }
    out = {key: _rows_to_sphere(grads[key], eps[key]) for key in _DELTA_KEYS}
    return DeltaBatch(**out), align_value


def _rows_to_sphere(g, eps_rows):
    norms = np.linalg.norm(g, axis=1)
    scale = np.where(norms > 0, eps_rows / np.where(norms > 0, norms, 1.0), 0.0)
    return g * scale[:, None]


def min_phase(params, enc, triples, delta_batch, config, optimizer):
    """One parameter step on clean + lambda*perturbed + beta*||theta||^2.

    Returns (clean loss value, perturbed loss value); the perturbations are
    treated as constants and never mutated.
    """
    fw = Forward(params, enc, trainable=True)
    clean = bpr_loss(params, enc, triples, forward=fw, reduction=config.reduction)
    loss = clean
    adv_value = 0.0
    if config.lambda_ > 0:
        if delta_batch is None:
            raise DataError("lambda > 0 requires perturbations from the max phase")
        adv = adversarial_bpr_loss(params, enc, triples, delta_batch,
                                   forward=fw, reduction=config.reduction)
        loss = ad.add(loss, ad.mul(ad.constant(config.lambda_), adv))
        adv_value = adv.item()
    if config.beta > 0:
        loss = ad.add(loss, ad.mul(ad.constant(config.beta), _reg_loss(fw)))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"training loss is {value}")
    grads = ad.grad(loss, fw.param_leaves())
    optimizer.step(params, dict(zip(fw.param_names(), (g.numpy() for g in grads))))
    return clean.item(), adv_value


# ---------------------------------------------------------------------------
# optimisers

def _check_finite(name, g, arr):
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite gradient for {name}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"parameter {name} diverged")


class SGD:
    def __init__(self, eta):
        self.eta = eta

    def step(self, params, grads):
        arrays = params.arrays()
        for name, g in grads.items():
            arrays[name] -= self.eta * g
            _check_finite(name, g, arrays[name])


class Adam:
    def __init__(self, eta, beta1=0.9, beta2=0.999, eps=1e-8):
        self.eta = eta
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        arrays = params.arrays()
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            arrays[name] -= self.eta * m_hat / (np.sqrt(v_hat) + self.eps)
            _check_finite(name, g, arrays[name])


def make_optimizer(config):
    return Adam(config.eta) if config.optimizer == "adam" else SGD(config.eta)


def replace_config(config, key, value):
    return replace(config, **{key: value})


# ---------------------------------------------------------------------------
# training loops

def pretrain(params, enc, feats_v, feats_t, config, start_epoch=1):
    """Standard BPR training with weight decay and early stopping on
    validation Recall@k; returns (best checkpoint, log)."""
    return _train(params, enc, feats_v, feats_t, config, adversarial=False,
                  start_epoch=start_epoch)


def uat_mc_train(params, enc, feats_v, feats_t, config, start_epoch=1):
    """Alternating max/min adversarial training from a pretrained model;
    config.mode == 'uat' (or alpha == 0) drops the coordination term."""
    return _train(params, enc, feats_v, feats_t, config, adversarial=True,
                  start_epoch=start_epoch)


def uat_train(params, enc, feats_v, feats_t, config, start_epoch=1):
    """Untargeted adversarial training without coordination (alpha = 0)."""
    cfg = replace(config, mode="uat")
    return _train(params, enc, feats_v, feats_t, cfg, adversarial=True,
                  start_epoch=start_epoch)


def _train(params, enc, feats_v, feats_t, config, adversarial, start_epoch=1):
    params = params.clone()
    if not adversarial:
        config = replace(config, lambda_=0.0, alpha=0.0)
    sampler = TripleSampler(enc.table, seed=config.seed)
    optimizer = make_optimizer(config)
    n_batches = max(1, enc.table.num_interactions // config.batch_size)
    log = TrainLog()
    best = params.clone()
    best_recall = -np.inf
    evals_since_best = 0
    for epoch in range(start_epoch, start_epoch + config.max_epochs):
        t0 = time.perf_counter()
        clean_sum = adv_sum = align_sum = 0.0
        for _ in range(n_batches):
            triples = sampler.sample(config.batch_size)
            delta_batch = None
            align_value = 0.0
            if adversarial:
                delta_batch, align_value = max_phase(params, enc, triples, config,
                                                     feats_v, feats_t)
            clean_value, adv_value = min_phase(params, enc, triples, delta_batch,
                                               config, optimizer)
            clean_sum += clean_value
            adv_sum += adv_value
            align_sum += align_value
        recall = np.nan
        if (epoch - start_epoch) % config.eval_every == 0:
            recall, _ = recall_ndcg(params, enc, k=config.eval_k)
            if recall > best_recall:
                best_recall = recall
                best = params.clone()
                evals_since_best = 0
            else:
                evals_since_best += 1
        seconds = time.perf_counter() - t0 if config.wall_clock else 0.0
        log.add(epoch, clean_sum / n_batches, adv_sum / n_batches,
                align_sum / n_batches, recall, seconds)
        if evals_since_best > config.patience:
            break
    if best_recall == -np.inf:
        best = params.clone()
    return best, log
