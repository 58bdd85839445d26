"""Encoder-only transformer assembly around mixture-of-head attention.

Single-sample forward/backward on time-major float64 matrices; batches are
loops over samples with averaged gradients. All learnable tensors live in a
flat registry (name -> Param) so the finite-difference checker and the
optimizers can treat the whole model uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .attention import (
    CabParams,
    HeadSpec,
    MixtureWeights,
    mixture_of_head_bwd,
    mixture_of_head_fwd,
)
from .numerics import (
    Param,
    ParameterError,
    ShapeError,
    as_matrix,
    sigmoid,
    softplus,
    zero_grads,
)

LN_EPS = 1e-8
SIGMA_EPS = 1e-5


class DegenerateTaskError(ValueError):
    """Task setup makes the loss undefined (e.g. imputation with no mask)."""


class NumericalFailure(RuntimeError):
    """A training step produced a non-finite loss."""


def sigmoid_inv(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ParameterError(f"value {p} not in (0, 1)")
    return math.log(p / (1.0 - p))


def softplus_inv(t: float) -> float:
    if not t > 0.0:
        raise ParameterError(f"value {t} not positive")
    return math.log(math.expm1(t))


# ---------------------------------------------------------------------------
# stationarization


@dataclass
class StationaryStats:
    mu: np.ndarray      # per-feature mean
    sigma: np.ndarray   # per-feature std, floored at SIGMA_EPS


def stationarize(x, epsilon: float = SIGMA_EPS):
    x = as_matrix(x)
    mu = x.mean(axis=0)
    sigma = np.maximum(x.std(axis=0), epsilon)
    return (x - mu) / sigma, StationaryStats(mu, sigma)


def destationarize(xp, stats: StationaryStats):
    return as_matrix(xp) * stats.sigma + stats.mu


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    task: str = "imputation"            # imputation | anomaly | classification
    d_in: int = 8
    d_model: int = 16
    d_k: int = 8
    h: int = 4
    m: int = 2                          # heads 1..m temporal, rest correlated
    n_blocks: int = 1
    n_classes: int = 2
    c: int = 1
    temporal: str = "self"              # self | destat
    positional: str = "none"            # none | sin
    lambda_mode: str = "fixed"          # fixed | learnable (soft-score extension)
    beta_learnable: bool = True
    tau_learnable: bool = True
    lambda_init: float = 0.5
    beta_init: float = 0.5
    tau_init: float = 1.0
    filtering_enabled: bool = True
    use_fft: bool = True
    d_ff: int = 0                       # 0 => 4 * d_model

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if not 0 <= self.m <= self.h:
            raise ParameterError(f"m={self.m} must lie in [0, h={self.h}]")
        if self.task not in ("imputation", "anomaly", "classification"):
            raise ParameterError(f"unknown task {self.task!r}")

    @property
    def d_out(self) -> int:
        return self.n_classes if self.task == "classification" else self.d_in

    def head_kind(self, i: int) -> str:
        if i < self.m:
            return self.temporal
        return "correlated"

    def to_dict(self) -> dict:
        return asdict(self)


def count_params(cfg: ModelConfig) -> int:
    """Closed-form size of the registry built by init_params."""
    n = cfg.d_in * cfg.d_model                                   # embedding
    per_block = 3 * cfg.h * cfg.d_model * cfg.d_k                # projections
    per_block += cfg.h * cfg.d_k * cfg.d_model                   # w_o
    per_block += 2 * 2 * cfg.d_model                             # two layernorms
    per_block += cfg.d_model * cfg.d_ff + cfg.d_ff               # ff in
    per_block += cfg.d_ff * cfg.d_model + cfg.d_model            # ff out
    n_corr = cfg.h - cfg.m
    scalars = 0
    if cfg.filtering_enabled and cfg.beta_learnable:
        scalars += 1
    if cfg.tau_learnable:
        scalars += 1
    if cfg.lambda_mode == "learnable":
        scalars += 1
    per_block += n_corr * scalars
    n += cfg.n_blocks * per_block
    if cfg.temporal == "destat" and cfg.m > 0:
        hidden = 2 * cfg.d_model
        n += 2 * cfg.d_in * hidden + hidden + hidden * 1 + 1     # xi projector
        n += cfg.d_in * hidden + hidden + hidden * 1 + 1         # delta projector
    n += cfg.d_model * cfg.d_out + cfg.d_out                     # task head
    return n


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)

    def mat(name, rows, cols, scale=None):
        scale = scale if scale is not None else 1.0 / math.sqrt(rows)
        params[name] = Param(name, rng.normal(0.0, scale, size=(rows, cols)))

    params: dict = {}
    mat("embed.w", cfg.d_in, cfg.d_model)
    for b in range(cfg.n_blocks):
        for i in range(cfg.h):
            mat(f"block{b}.head{i}.w_q", cfg.d_model, cfg.d_k)
            mat(f"block{b}.head{i}.w_k", cfg.d_model, cfg.d_k)
            mat(f"block{b}.head{i}.w_v", cfg.d_model, cfg.d_k)
            if cfg.head_kind(i) == "correlated":
                if cfg.filtering_enabled and cfg.beta_learnable:
                    params[f"block{b}.head{i}.beta_raw"] = Param(
                        f"block{b}.head{i}.beta_raw", sigmoid_inv(cfg.beta_init))
                if cfg.tau_learnable:
                    params[f"block{b}.head{i}.tau_raw"] = Param(
                        f"block{b}.head{i}.tau_raw", softplus_inv(cfg.tau_init))
                if cfg.lambda_mode == "learnable":
                    params[f"block{b}.head{i}.lambda_raw"] = Param(
                        f"block{b}.head{i}.lambda_raw", sigmoid_inv(cfg.lambda_init))
        mat(f"block{b}.w_o", cfg.h * cfg.d_k, cfg.d_model)
        for ln in ("ln1", "ln2"):
            params[f"block{b}.{ln}.gain"] = Param(f"block{b}.{ln}.gain", np.ones(cfg.d_model))
            params[f"block{b}.{ln}.bias"] = Param(f"block{b}.{ln}.bias", np.zeros(cfg.d_model))
        mat(f"block{b}.ff.w1", cfg.d_model, cfg.d_ff)
        params[f"block{b}.ff.b1"] = Param(f"block{b}.ff.b1", np.zeros(cfg.d_ff))
        mat(f"block{b}.ff.w2", cfg.d_ff, cfg.d_model)
        params[f"block{b}.ff.b2"] = Param(f"block{b}.ff.b2", np.zeros(cfg.d_model))
    if cfg.temporal == "destat" and cfg.m > 0:
        hidden = 2 * cfg.d_model
        mat("destat.xi.w1", 2 * cfg.d_in, hidden)
        params["destat.xi.b1"] = Param("destat.xi.b1", np.zeros(hidden))
        mat("destat.xi.w2", hidden, 1)
        params["destat.xi.b2"] = Param("destat.xi.b2", np.zeros(1))
        mat("destat.delta.w1", cfg.d_in, hidden)
        params["destat.delta.b1"] = Param("destat.delta.b1", np.zeros(hidden))
        mat("destat.delta.w2", hidden, 1)
        params["destat.delta.b2"] = Param("destat.delta.b2", np.zeros(1))
    mat("head.w", cfg.d_model, cfg.d_out)
    params["head.b"] = Param("head.b", np.zeros(cfg.d_out))
    return params


def _cab_for_head(cfg: ModelConfig, params: dict, b: int, i: int) -> CabParams:
    def raw(suffix, default):
        p = params.get(f"block{b}.head{i}.{suffix}")
        return float(p.value) if p is not None else default

    return CabParams(
        lambda_raw=raw("lambda_raw", sigmoid_inv(cfg.lambda_init)),
        beta_raw=raw("beta_raw", sigmoid_inv(cfg.beta_init) if 0 < cfg.beta_init < 1
                     else 0.0),
        tau_raw=raw("tau_raw", softplus_inv(cfg.tau_init)),
        c=cfg.c,
        lambda_mode=cfg.lambda_mode,
        use_fft=cfg.use_fft,
        filtering_enabled=cfg.filtering_enabled,
    )


# ---------------------------------------------------------------------------
# small layers


def _layernorm_fwd(x, gain, bias):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    y = (x - mu) * inv
    return y * gain + bias, (y, inv, gain)


def _layernorm_bwd(cache, g):
    y, inv, gain = cache
    n = y.shape[1]
    dgain = (g * y).sum(axis=0)
    dbias = g.sum(axis=0)
    dy = g * gain
    dx = inv * (dy - dy.mean(axis=1, keepdims=True)
                - y * (dy * y).mean(axis=1, keepdims=True))
    return dx, dgain, dbias


def _mlp2_fwd(x, w1, b1, w2, b2):
    """Two-layer map with tanh hidden activation (used by the projectors)."""
    z = x @ w1 + b1
    a = np.tanh(z)
    return a @ w2 + b2, (x, a, w1, w2)


def _mlp2_bwd(cache, g):
    x, a, w1, w2 = cache
    dw2 = a.T @ g
    db2 = g.sum(axis=0)
    da = g @ w2.T
    dz = da * (1.0 - a * a)
    dw1 = x.T @ dz
    db1 = dz.sum(axis=0)
    dx = dz @ w1.T
    return dx, dw1, db1, dw2, db2


def _positional_encoding(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(d)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return pe


# ---------------------------------------------------------------------------
# forward / backward


def model_forward(x, params: dict, cfg: ModelConfig):
    """Full forward pass: stationarize, embed, encoder blocks, task head.

    Returns (prediction, cache). For reconstruction tasks the prediction is
    destationarized back to the input scale; for classification it is the
    logits vector over classes.
    """
    x = as_matrix(x)
    if x.shape[1] != cfg.d_in:
        raise ShapeError(f"input has {x.shape[1]} features, config expects {cfg.d_in}")
    t = x.shape[0]
    xp, stats = stationarize(x)

    xi, delta = 1.0, np.zeros(t)
    destat_caches = None
    if cfg.temporal == "destat" and cfg.m > 0:
        stats_vec = np.concatenate([stats.mu, stats.sigma])[None, :]
        xi_pre, xi_cache = _mlp2_fwd(stats_vec, params["destat.xi.w1"].value,
                                     params["destat.xi.b1"].value,
                                     params["destat.xi.w2"].value,
                                     params["destat.xi.b2"].value)
        xi = float(softplus(xi_pre[0, 0]))
        delta_out, delta_cache = _mlp2_fwd(x, params["destat.delta.w1"].value,
                                           params["destat.delta.b1"].value,
                                           params["destat.delta.w2"].value,
                                           params["destat.delta.b2"].value)
        delta = delta_out[:, 0]
        destat_caches = (xi_pre[0, 0], xi_cache, delta_cache)

    hrep = xp @ params["embed.w"].value
    if cfg.positional == "sin":
        hrep = hrep + _positional_encoding(t, cfg.d_model)

    block_caches = []
    for b in range(cfg.n_blocks):
        heads = []
        for i in range(cfg.h):
            kind = cfg.head_kind(i)
            heads.append(HeadSpec(
                kind=kind,
                w_q=params[f"block{b}.head{i}.w_q"].value,
                w_k=params[f"block{b}.head{i}.w_k"].value,
                w_v=params[f"block{b}.head{i}.w_v"].value,
                cab=_cab_for_head(cfg, params, b, i) if kind == "correlated" else None,
            ))
        mix = MixtureWeights(heads=heads, w_o=params[f"block{b}.w_o"].value,
                             xi=xi, delta=delta)
        attn_out, attn_cache = mixture_of_head_fwd(hrep, mix)
        r1, ln1_cache = _layernorm_fwd(hrep + attn_out,
                                       params[f"block{b}.ln1.gain"].value,
                                       params[f"block{b}.ln1.bias"].value)
        z1 = r1 @ params[f"block{b}.ff.w1"].value + params[f"block{b}.ff.b1"].value
        a1 = np.maximum(z1, 0.0)
        ff_out = a1 @ params[f"block{b}.ff.w2"].value + params[f"block{b}.ff.b2"].value
        r2, ln2_cache = _layernorm_fwd(r1 + ff_out,
                                       params[f"block{b}.ln2.gain"].value,
                                       params[f"block{b}.ln2.bias"].value)
        block_caches.append((attn_cache, ln1_cache, r1, z1, a1, ln2_cache))
        hrep = r2

    if cfg.task == "classification":
        pooled = hrep.mean(axis=0)
        pred = pooled @ params["head.w"].value + params["head.b"].value
    else:
        recon_p = hrep @ params["head.w"].value + params["head.b"].value
        pred = destationarize(recon_p, stats)
    cache = (x, xp, stats, hrep, block_caches, destat_caches, t)
    return pred, cache


def model_backward(dpred, cache, params: dict, cfg: ModelConfig):
    """Accumulate d(loss)/d(param) into Param.grad for every registry entry."""
    x, xp, stats, hrep, block_caches, destat_caches, t = cache

    if cfg.task == "classification":
        dpooled = dpred
        dh = np.repeat(dpooled[None, :] @ params["head.w"].value.T, t, axis=0) / t
        params["head.w"].grad += np.outer(hrep.mean(axis=0), dpooled)
        params["head.b"].grad += dpooled
    else:
        drecon_p = dpred * stats.sigma
        dh = drecon_p @ params["head.w"].value.T
        params["head.w"].grad += hrep.T @ drecon_p
        params["head.b"].grad += drecon_p.sum(axis=0)

    dxi_total, ddelta_total = 0.0, np.zeros(t)
    for b in reversed(range(cfg.n_blocks)):
        attn_cache, ln1_cache, r1, z1, a1, ln2_cache = block_caches[b]
        dr2_in, dg2, db2 = _layernorm_bwd(ln2_cache, dh)
        params[f"block{b}.ln2.gain"].grad += dg2
        params[f"block{b}.ln2.bias"].grad += db2
        # feed-forward branch
        dff = dr2_in
        params[f"block{b}.ff.w2"].grad += a1.T @ dff
        params[f"block{b}.ff.b2"].grad += dff.sum(axis=0)
        da1 = dff @ params[f"block{b}.ff.w2"].value.T
        dz1 = da1 * (z1 > 0.0)
        params[f"block{b}.ff.w1"].grad += r1.T @ dz1
        params[f"block{b}.ff.b1"].grad += dz1.sum(axis=0)
        dr1 = dr2_in + dz1 @ params[f"block{b}.ff.w1"].value.T
        dr1_in, dg1, db1 = _layernorm_bwd(ln1_cache, dr1)
        params[f"block{b}.ln1.gain"].grad += dg1
        params[f"block{b}.ln1.bias"].grad += db1
        dx_attn, head_grads, dw_o, dxi, ddelta = mixture_of_head_bwd(attn_cache, dr1_in)
        params[f"block{b}.w_o"].grad += dw_o
        dxi_total += dxi
        if ddelta is not None:
            ddelta_total += ddelta
        for i, grads in enumerate(head_grads):
            params[f"block{b}.head{i}.w_q"].grad += grads["dw_q"]
            params[f"block{b}.head{i}.w_k"].grad += grads["dw_k"]
            params[f"block{b}.head{i}.w_v"].grad += grads["dw_v"]
            for key, pname in (("dbeta_raw", "beta_raw"), ("dtau_raw", "tau_raw"),
                               ("dlambda_raw", "lambda_raw")):
                if key in grads:
                    p = params.get(f"block{b}.head{i}.{pname}")
                    if p is not None:
                        p.grad += grads[key]
        dh = dr1_in + dx_attn

    params["embed.w"].grad += xp.T @ dh

    if destat_caches is not None:
        xi_pre, xi_cache, delta_cache = destat_caches
        dxi_pre = dxi_total * float(sigmoid(xi_pre))
        _, dw1, db1, dw2, db2 = _mlp2_bwd(xi_cache, np.array([[dxi_pre]]))
        params["destat.xi.w1"].grad += dw1
        params["destat.xi.b1"].grad += db1
        params["destat.xi.w2"].grad += dw2
        params["destat.xi.b2"].grad += db2
        _, dw1, db1, dw2, db2 = _mlp2_bwd(delta_cache, ddelta_total[:, None])
        params["destat.delta.w1"].grad += dw1
        params["destat.delta.b1"].grad += db1
        params["destat.delta.w2"].grad += dw2
        params["destat.delta.b2"].grad += db2


def encoder_forward(x, params: dict, cfg: ModelConfig):
    """Representation only (no task head, no destationarization)."""
    pred, cache = model_forward(x, params, cfg)
    return cache[3]


# ---------------------------------------------------------------------------
# losses


def task_loss(pred, target, task: str, mask=None):
    """Returns (loss, dpred).

    imputation: MSE over the hidden entries (mask == 0) only;
    anomaly: MSE over all entries; classification: cross-entropy on logits.
    """
    if task == "classification":
        logits = np.asarray(pred, dtype=np.float64).reshape(-1)
        z = logits - logits.max()
        p = np.exp(z)
        p /= p.sum()
        label = int(target)
        loss = -math.log(max(p[label], 1e-300))
        dlogits = p.copy()
        dlogits[label] -= 1.0
        return loss, dlogits
    pred = as_matrix(pred)
    target = as_matrix(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if task == "imputation":
        if mask is None or not np.any(mask == 0):
            raise DegenerateTaskError("imputation needs at least one hidden entry")
        hidden = (np.asarray(mask) == 0)
        diff = np.where(hidden, pred - target, 0.0)
        n = int(hidden.sum())
    else:
        diff = pred - target
        n = diff.size
    loss = float((diff * diff).sum()) / n
    return loss, 2.0 * diff / n


def sample_loss_and_grad(sample, params: dict, cfg: ModelConfig) -> float:
    """Forward + loss + backward for one sample; accumulates into grads."""
    x_in, target, mask, label = sample
    pred, cache = model_forward(x_in, params, cfg)
    if cfg.task == "classification":
        loss, dpred = task_loss(pred, label, cfg.task)
    else:
        loss, dpred = task_loss(pred, target, cfg.task, mask)
    model_backward(dpred, cache, params, cfg)
    return loss


def batch_loss_and_grad(batch, params: dict, cfg: ModelConfig) -> float:
    """Zeroes grads, averages loss and gradient over the batch."""
    zero_grads(params)
    total = 0.0
    for sample in batch:
        total += sample_loss_and_grad(sample, params, cfg)
    n = len(batch)
    for p in params.values():
        p.grad /= n
    return total / n


# ---------------------------------------------------------------------------
# optimizers and training


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict):
        for p in params.values():
            p.value -= self.lr * p.grad


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            self.m[name] = b1 * self.m[name] + (1 - b1) * p.grad
            self.v[name] = b2 * self.v[name] + (1 - b2) * p.grad**2
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train_step(batch, params: dict, cfg: ModelConfig, optimizer) -> float:
    """One optimization step; returns the pre-update loss."""
    loss = batch_loss_and_grad(batch, params, cfg)
    if not np.isfinite(loss):
        raise NumericalFailure(f"non-finite loss {loss!r}; step aborted")
    optimizer.step(params)
    return loss


def train_model(train_samples, val_samples, params: dict, cfg: ModelConfig,
                lr: float = 1e-3, batch_size: int = 16, epochs: int = 30,
                patience: int = 10, optimizer: str = "adam", seed: int = 0):
    """Plain training loop with the fixed-patience early-stopping rule.

    Returns a list of per-epoch records (dicts with train/val loss).
    """
    if lr < 0:
        raise ParameterError("learning rate must be non-negative")
    opt = Adam(lr) if optimizer == "adam" else SGD(lr)
    rng = np.random.default_rng(seed)
    records = []
    best_val = math.inf
    since_best = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_samples))
        train_loss, nb = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [train_samples[j] for j in order[start:start + batch_size]]
            train_loss += train_step(batch, params, cfg, opt)
            nb += 1
        val_loss = evaluate_loss(val_samples, params, cfg)
        records.append({"epoch": epoch, "train_loss": train_loss / max(nb, 1),
                        "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    return records


def evaluate_loss(samples, params: dict, cfg: ModelConfig) -> float:
    total = 0.0
    for x_in, target, mask, label in samples:
        pred, _ = model_forward(x_in, params, cfg)
        if cfg.task == "classification":
            loss, _ = task_loss(pred, label, cfg.task)
        else:
            loss, _ = task_loss(pred, target, cfg.task, mask)
        total += loss
    return total / max(len(samples), 1)


# ---------------------------------------------------------------------------
# metrics


def anomaly_decision(scores, truth, threshold_quantile: float, val_scores=None):
    """Quantile-threshold anomaly labeling with precision/recall/F1.

    Threshold is the given quantile of ``val_scores`` (falling back to the
    test scores themselves). With nothing flagged and nothing true, P, R and
    F1 are all defined as 1.0. All-equal scores are reported as degenerate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    if not 0.0 < threshold_quantile < 1.0:
        raise ParameterError("threshold_quantile must lie in (0, 1)")
    ref = np.asarray(val_scores, dtype=np.float64) if val_scores is not None else scores
    degenerate = bool(np.all(ref == ref[0]))
    threshold = float(np.quantile(ref, threshold_quantile))
    labels = scores > threshold
    tp = int(np.sum(labels & truth))
    fp = int(np.sum(labels & ~truth))
    fn = int(np.sum(~labels & truth))
    precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 1.0
    f1 = (2 * precision * recall / (precision + recall)
          if (precision + recall) > 0 else 0.0)
    return {"labels": labels, "threshold": threshold, "precision": precision,
            "recall": recall, "f1": f1, "degenerate": degenerate}


def evaluate_metrics(samples, params: dict, cfg: ModelConfig,
                     val_samples=None, threshold_quantile: float = 0.99) -> dict:
    """Per-task test metrics: MSE+MAE, P/R/F1, or accuracy."""
    if cfg.task == "classification":
        correct = 0
        for x_in, target, mask, label in samples:
            pred, _ = model_forward(x_in, params, cfg)
            correct += int(np.argmax(pred) == int(label))
        return {"accuracy": correct / max(len(samples), 1)}
    if cfg.task == "imputation":
        se, ae, n = 0.0, 0.0, 0
        for x_in, target, mask, label in samples:
            pred, _ = model_forward(x_in, params, cfg)
            hidden = (np.asarray(mask) == 0)
            diff = (pred - target)[hidden]
            se += float((diff * diff).sum())
            ae += float(np.abs(diff).sum())
            n += diff.size
        return {"mse": se / max(n, 1), "mae": ae / max(n, 1)}
    # anomaly: per-time-step reconstruction error, quantile threshold
    def step_errors(sset):
        errs, flags = [], []
        for x_in, target, mask, label in sset:
            pred, _ = model_forward(x_in, params, cfg)
            errs.append(((pred - target) ** 2).mean(axis=1))
            flags.append(np.asarray(label if label is not None else
                                    np.zeros(pred.shape[0])))
        return np.concatenate(errs), np.concatenate(flags)

    test_errs, test_truth = step_errors(samples)
    val_errs = step_errors(val_samples)[0] if val_samples else None
    dec = anomaly_decision(test_errs, test_truth, threshold_quantile, val_errs)
    return {"precision": dec["precision"], "recall": dec["recall"], "f1": dec["f1"],
            "threshold": dec["threshold"], "degenerate": dec["degenerate"]}


# ---------------------------------------------------------------------------
# checkpoint I/O

CHECKPOINT_TAG = "lagattn-checkpoint v1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict) -> None:
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_TAG + "\n")
        for name in sorted(params):
            v = params[name].value
            dims = " ".join(str(d) for d in v.shape)
            fh.write(f"{name} {v.ndim}{' ' + dims if dims else ''}\n")
            fh.write(",".join(repr(float(x)) for x in v.reshape(-1)) + "\n")


def load_checkpoint(path) -> dict:
    """Returns name -> ndarray; raises CheckpointError on malformed input."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_TAG:
        raise CheckpointError(f"{path}: bad or missing format tag on line 1")
    out = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        header = lines[i].split()
        if len(header) < 2:
            raise CheckpointError(f"{path}: malformed header at line {i + 1}")
        name, ndim = header[0], int(header[1])
        shape = tuple(int(s) for s in header[2:2 + ndim])
        if len(shape) != ndim:
            raise CheckpointError(f"{path}: header/shape mismatch at line {i + 1}")
        if i + 1 >= len(lines):
            raise CheckpointError(f"{path}: missing values for {name}")
        vals = np.array([float(s) for s in lines[i + 1].split(",")] if lines[i + 1]
                        else [], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if vals.size != expected:
            raise CheckpointError(f"{path}: {name} expected {expected} values, "
                                  f"got {vals.size}")
        out[name] = vals.reshape(shape)
        i += 2
    return out


def load_into(params: dict, path) -> None:
    values = load_checkpoint(path)
    for name, p in params.items():
        if name not in values:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if values[name].shape != p.value.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        p.value[...] = values[name]
