"""Incremental adaptation of a trained calibration network to a new domain.

Strategies, all regression adaptations of their classification originals:

* ``finetune`` - supervised smooth-L1 on the new data only.
* ``lwf``      - adds ``lambda0 * smooth_l1(teacher_out, student_out)``.
* ``icarl``    - LwF plus replay of herded old-domain exemplars.
* ``lucir``    - cosine head, replay, and the less-forget feature penalty
  ``1 - cos(f_teacher, f_student)``.
* ``bic``      - iCaRL-style stage 1, then a per-output linear correction
  ``q_k = alpha_k * o_k + beta_k`` fit on a balanced held-out pool.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import tensor as T
from .nn.network import Network, TeacherSnapshot
from .nn.optim import plateau_update, sgd_step
from .nn.train import TrainConfig, TrainResult, epoch_batches, mu_mse, run_epoch
from .pano_pipeline import ArrayDataset

log = logging.getLogger(__name__)

STRATEGIES = ("finetune", "lwf", "icarl", "lucir", "bic")


class StrategyError(ValueError):
    pass


class UnbalancedValidationError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "finetune"
    lambda0: float = 1.0
    exemplar_pct: float = 0.0
    lambda_dist: float = 1.0
    bic_val_fraction: float = 0.1
    # distill on replayed exemplars too, not only on new-domain samples
    distill_exemplars: bool = True
    # >0: herd separately inside this many pitch_n quantile bins
    herding_bins: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise StrategyError(f"unknown strategy {self.kind!r}; valid: {', '.join(STRATEGIES)}")
        if not 0.0 <= self.exemplar_pct <= 100.0:
            raise StrategyError("exemplar_pct must lie in [0, 100]")
        if self.exemplar_pct > 0 and self.kind in ("finetune", "lwf"):
            raise StrategyError(f"{self.kind} does not replay exemplars; use icarl, lucir or bic")
        if self.lambda0 < 0 or self.lambda_dist < 0:
            raise StrategyError("loss weights must be non-negative")
        if not 0.0 < self.bic_val_fraction < 1.0:
            raise StrategyError("bic_val_fraction must lie in (0, 1)")

    @property
    def distill_weight(self) -> float:
        """Output-distillation weight; fine-tuning is distillation with weight 0."""
        if self.kind in ("finetune", "lucir"):
            return 0.0
        return self.lambda0

    @property
    def uses_replay(self) -> bool:
        return self.kind in ("icarl", "lucir", "bic")

    def describe(self) -> str:
        if self.kind == "lwf" and self.lambda0 == 0:
            return "lwf with lambda0=0 (equivalent to finetune)"
        if self.kind == "icarl" and self.exemplar_pct == 0:
            return "icarl with 0% exemplars (equivalent to lwf)"
        return self.kind

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- losses


def lwf_terms(pred_new, target_new, pred_cur, teacher_out):
    """Supervised and distillation smooth-L1 terms, kept separate for logging."""
    if np.shape(pred_cur) != np.shape(teacher_out):
        raise ValueError(f"teacher/current batch mismatch: {np.shape(teacher_out)} vs {np.shape(pred_cur)}")
    return T.smooth_l1(pred_new, target_new), T.smooth_l1(pred_cur, teacher_out)


def lwf_loss(pred_new, target_new, pred_cur, teacher_out, lambda0: float):
    """``smooth_l1(target, pred) + lambda0 * smooth_l1(teacher, current)``."""
    if lambda0 == 0:
        return T.smooth_l1(pred_new, target_new)
    new, distill = lwf_terms(pred_new, target_new, pred_cur, teacher_out)
    return new + distill * lambda0


def less_forget_term(f_cur, f_teacher):
    """Batch mean of ``1 - cos(f_teacher, f_cur)``."""
    f_cur = T.as_tensor(f_cur)
    f_teacher = np.asarray(f_teacher, dtype=f_cur.dtype)
    if f_teacher.shape != f_cur.shape:
        raise ValueError(f"feature shape mismatch: {f_teacher.shape} vs {f_cur.shape}")
    tn = np.linalg.norm(f_teacher, axis=1, keepdims=True)
    if np.any(tn == 0):
        raise T.DegenerateFeatureError("teacher feature vector has zero norm")
    cos = T.sum_(T.mul(T.l2_normalize(f_cur, axis=1), f_teacher / tn), axis=1)
    return T.mean(T.neg(cos)) + 1.0


def lucir_loss(pred, target, f_cur, f_teacher, lambda_dist: float):
    return T.smooth_l1(pred, target) + less_forget_term(f_cur, f_teacher) * lambda_dist


# ---------------------------------------------------------------- exemplars


@dataclass
class ExemplarMemory:
    order: np.ndarray  # full herding order over the old training set
    pct: float

    @property
    def size(self) -> int:
        return memory_size(self.pct, len(self.order))

    @property
    def indices(self) -> np.ndarray:
        return self.order[: self.size]

    def beyond_budget(self, count: int) -> np.ndarray:
        return self.order[self.size: self.size + count]


def memory_size(pct: float, n_old: int) -> int:
    # round half up, unlike Python's banker's rounding
    return int(np.floor(pct / 100.0 * n_old + 0.5))


HERD_TIE_TOL = 1e-12


def herd_exemplars(features, m: int | None = None) -> list:
    """Greedy herding toward the mean feature vector.

    Step ``k+1`` picks the unselected ``x`` minimizing
    ``||mu - (sum_selected + f_x) / (k + 1)||``; ties, up to a relative
    ``HERD_TIE_TOL`` on squared distances, go to the lowest index.
    Returns the first ``m`` picks (all ``N`` by default).
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise ValueError("empty feature set")
    n = len(f)
    m = n if m is None else m
    if not 1 <= m <= n:
        raise ValueError(f"budget m={m} must lie in [1, {n}]")
    mu = f.mean(axis=0)
    running = np.zeros_like(mu)
    free = np.ones(n, dtype=bool)
    picks = []
    for k in range(m):
        d = mu - (running + f) / (k + 1)
        dist = np.einsum("ij,ij->i", d, d)
        dist[~free] = np.inf
        best = dist.min()
        # distances equal up to rounding count as ties (e.g. N=2 at step one)
        i = int(np.flatnonzero(dist <= best + HERD_TIE_TOL * (1.0 + best))[0])
        picks.append(i)
        free[i] = False
        running += f[i]
    return picks


def herd_binned(features, pitch_n, bins: int) -> list:
    """Herding inside pitch quantile bins, merged into one global order.

    The merge always extends the bin furthest behind its proportional share,
    so every budget is a prefix of the same order.
    """
    pitch_n = np.asarray(pitch_n)
    edges = np.quantile(pitch_n, np.linspace(0, 1, bins + 1)[1:-1])
    labels = np.searchsorted(edges, pitch_n, side="right")
    groups = [np.flatnonzero(labels == b) for b in range(bins)]
    groups = [g for g in groups if len(g)]
    orders = [g[herd_exemplars(features[g])] for g in groups]
    n = len(pitch_n)
    taken = [0] * len(groups)
    out = []
    for k in range(n):
        deficits = [len(g) * (k + 1) / n - t if t < len(g) else -np.inf for g, t in zip(groups, taken)]
        b = int(np.argmax(deficits))
        out.append(int(orders[b][taken[b]]))
        taken[b] += 1
    return out


def build_replay_stream(n_new: int, memory_size_: int, rng, batch_size: int = 16) -> list:
    """One epoch of batches over the pooled indices ``[0, n_new + memory)``.

    Indices below ``n_new`` address new-domain samples, the rest exemplars.
    """
    if memory_size_ > 0 and batch_size < 2:
        raise ValueError("batch size must be >= 2 when replaying exemplars")
    return epoch_batches(n_new + memory_size_, batch_size, rng)


# ---------------------------------------------------------------- BiC


@dataclass
class BiCParams:
    alpha: np.ndarray = field(default_factory=lambda: np.ones(3))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_dict(self) -> dict:
        return {"alpha": [float(a) for a in self.alpha], "beta": [float(b) for b in self.beta]}

    @classmethod
    def from_dict(cls, d) -> BiCParams:
        return cls(np.asarray(d["alpha"], dtype=float), np.asarray(d["beta"], dtype=float))

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.alpha == 1.0) and np.all(self.beta == 0.0))


def bic_apply(outputs, params):
    """``q_k = alpha_k * o_k + beta_k`` per output column.

    With Tensor arguments (``params`` a pair of tensors) the result is
    differentiable; otherwise plain arrays are returned.
    """
    if isinstance(params, BiCParams):
        return np.asarray(outputs) * params.alpha + params.beta
    alpha, beta = params
    return T.add(T.mul(outputs, alpha), beta)


def bic_fit(outputs, targets, domains, max_iter: int = 200, tol: float = 1e-12) -> BiCParams:
    """Fit the bias-correction layer on frozen network outputs.

    Minimizes ``smooth_l1(q, y)`` over (alpha, beta) only. Gradients come from
    the autodiff graph; each step is preconditioned by the per-output 2x2
    Gauss-Newton matrix of the loss, and a plateau rule shrinks the step when
    the loss stops improving.
    """
    o = np.asarray(outputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    domains = np.asarray(domains)
    if len(o) == 0:
        raise UnbalancedValidationError("empty validation pool")
    if len(np.unique(domains)) < 2:
        raise UnbalancedValidationError("unbalanced BiC validation: pool holds a single domain")
    alpha = T.Tensor(np.ones(o.shape[1]), requires_grad=True)
    beta = T.Tensor(np.zeros(o.shape[1]), requires_grad=True)
    scale = 1.0 / o.size
    step = 1.0
    best, bad = None, 0
    for _ in range(max_iter):
        alpha.grad = beta.grad = None
        loss = T.smooth_l1(bic_apply(T.Tensor(o), (alpha, beta)), y)
        loss.backward()
        value = loss.item()
        if best is None or value < best - 1e-15:
            best, bad = value, 0
        else:
            bad += 1
            if bad >= 2:
                step *= 0.1
                bad = 0
        quad = (np.abs(y - (o * alpha.data + beta.data)) < 1).astype(float)
        delta_a = np.empty_like(alpha.data)
        delta_b = np.empty_like(beta.data)
        for k in range(o.shape[1]):
            w, ok = quad[:, k], o[:, k]
            h = scale * np.array([[np.sum(w * ok * ok), np.sum(w * ok)], [np.sum(w * ok), np.sum(w)]])
            h += 1e-9 * np.eye(2)
            delta_a[k], delta_b[k] = np.linalg.solve(h, [alpha.grad[k], beta.grad[k]])
        alpha.data -= step * delta_a
        beta.data -= step * delta_b
        if step * max(np.abs(delta_a).max(), np.abs(delta_b).max()) < tol or step < 1e-12:
            break
    return BiCParams(alpha.data.copy(), beta.data.copy())


# ---------------------------------------------------------------- training


@dataclass
class DomainData:
    train: ArrayDataset | None
    val: ArrayDataset | None = None


@dataclass
class IncrementalResult:
    net: Network
    bic: BiCParams | None
    history: list
    memory: ExemplarMemory | None
    teacher_hash: str
    train: TrainResult


def _val_metric(net, ds):
    if ds is None or len(ds) == 0:
        return None
    return mu_mse(net.predict(ds.images), ds.targets)


def train_incremental(base: Network, old: DomainData, new: DomainData, strategy: StrategyConfig,
                      cfg: TrainConfig, max_steps: int | None = None) -> IncrementalResult:
    """Adapt ``base`` to ``new`` while limiting forgetting of ``old``.

    The base network is left untouched; the adapted copy is returned. The
    lr plateau rule follows new-domain validation muMSE (old-domain data is
    not assumed available for model selection).
    """
    if strategy.kind == "lucir" and base.config.head != "cosine":
        raise StrategyError("strategy/head mismatch: lucir requires a base network with a cosine head")
    if strategy.exemplar_pct > 0 and (old is None or old.train is None or len(old.train) == 0):
        raise StrategyError("missing old_data: exemplar replay needs the old training set")
    if new.train is None or len(new.train) == 0:
        raise ValueError("new-domain training set is empty")
    if strategy.describe() != strategy.kind:
        log.info("strategy %s", strategy.describe())

    teacher = TeacherSnapshot(base)
    net = base.copy()
    rng = np.random.default_rng(cfg.seed)
    state = cfg.new_state()

    memory = None
    if (strategy.uses_replay and strategy.exemplar_pct > 0) or strategy.kind == "bic":
        if old is None or old.train is None:
            raise StrategyError("missing old_data: bic needs old exemplars for its validation pool")
        feats = teacher.features(old.train.images)
        if strategy.herding_bins:
            order = herd_binned(feats, old.train.targets[:, 1], strategy.herding_bins)
        else:
            order = herd_exemplars(feats)
        memory = ExemplarMemory(np.asarray(order, dtype=np.int64), strategy.exemplar_pct)

    new_train = new.train
    bic_pool = None
    if strategy.kind == "bic":
        split_rng = np.random.default_rng([cfg.seed, 1])
        perm = split_rng.permutation(len(new_train))
        n_val = max(1, int(round(strategy.bic_val_fraction * len(new_train))))
        old_val_idx = memory.beyond_budget(n_val)
        n_val = min(n_val, len(old_val_idx))
        if n_val == 0:
            raise UnbalancedValidationError(
                "unbalanced BiC validation: no old exemplars left beyond the replay budget")
        bic_pool = (new_train.subset(perm[:n_val]), old.train.subset(old_val_idx[:n_val]))
        new_train = new_train.subset(np.sort(perm[n_val:]))

    n_new = len(new_train)
    mem_idx = memory.indices if memory is not None else np.zeros(0, dtype=np.int64)
    if len(mem_idx):
        images = np.concatenate([new_train.images, old.train.images[mem_idx]])
        targets = np.concatenate([new_train.targets, old.train.targets[mem_idx]])
    else:
        images, targets = new_train.images, new_train.targets
    if len(mem_idx) and cfg.batch_size < 2:
        raise ValueError("batch size must be >= 2 when replaying exemplars")

    lam0 = strategy.distill_weight
    steps = 0
    # the teacher is frozen, so its responses over the fixed pool are computed once
    t_out = teacher.predict(images) if lam0 > 0 else None
    t_feat = teacher.features(images) if strategy.kind == "lucir" else None

    def loss_fn(idx):
        x, y = images[idx], targets[idx]
        fp = net(x)
        sup = T.smooth_l1(fp.outputs, y)
        terms = {"new": sup.item()}
        if strategy.kind == "lucir":
            dist = less_forget_term(fp.features, t_feat[idx])
            terms["distill"] = dist.item()
            return sup + dist * strategy.lambda_dist, terms
        if lam0 == 0:
            return sup, terms
        if strategy.distill_exemplars:
            cur, teach = fp.outputs, t_out[idx]
        else:
            rows = np.flatnonzero(idx < n_new)
            cur, teach = T.take_rows(fp.outputs, rows), t_out[idx[rows]]
        distill = T.smooth_l1(cur, teach)
        terms["distill"] = distill.item()
        return sup + distill * lam0, terms

    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = state.lr
        if max_steps is not None:
            # truncated run used for equivalence checks: no validation, no schedule
            for idx in build_replay_stream(n_new, len(mem_idx), rng, cfg.batch_size):
                if steps >= max_steps:
                    break
                net.zero_grad()
                loss_fn(idx)[0].backward()
                sgd_step(net, state)
                steps += 1
            if steps >= max_steps:
                break
            continue
        rec = run_epoch(net, state, n_new + len(mem_idx), cfg.batch_size, rng, loss_fn)
        terms = rec.pop("loss_terms", {})
        v_old = _val_metric(net, old.val if old is not None else None)
        v_new = _val_metric(net, new.val)
        if v_new is not None:
            plateau_update(state, v_new)
        history.append({
            "epoch": epoch,
            "lr": lr,
            "train_loss": rec["train_loss"],
            "loss_terms": {"new": terms.get("new"), "distill": terms.get("distill")},
            "val_muMSE_old": v_old,
            "val_muMSE_new": v_new,
        })
        log.info("[%s] epoch %d lr=%.2g loss=%.5f old=%s new=%s", strategy.kind, epoch, lr,
                 rec["train_loss"], v_old, v_new)

    if teacher.param_hash() != teacher.hash:
        raise RuntimeError("teacher parameters changed during incremental training")

    bic = None
    if strategy.kind == "bic":
        new_pool, old_pool = bic_pool
        pool_x = np.concatenate([new_pool.images, old_pool.images])
        pool_y = np.concatenate([new_pool.targets, old_pool.targets])
        domains = np.r_[np.ones(len(new_pool)), np.zeros(len(old_pool))]
        bic = bic_fit(net.predict(pool_x), pool_y, domains)
        history.append({"stage": 2, "bic": bic.to_dict(), "pool_size": int(len(pool_y))})

    return IncrementalResult(net, bic, history, memory, teacher.hash, TrainResult(state, rng, history))
