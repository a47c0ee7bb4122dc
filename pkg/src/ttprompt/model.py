"""Prompt-injected transformer classifier with analytic gradients.

Layout of one forward pass for task ``t`` on a batch of ``B`` samples:

1. Missing views are zero-imputed, then each view is linearly encoded to
   width ``D = d / 2``.
2. The sequence is ``[cls, h_1, ..., h_n]`` (``L = n + 1`` rows).
3. Each of the frozen pre-norm layers computes ``q, k, v`` and then adds
   ``P_M[:D] + P_T[:D]`` to every key row and ``P_M[D:] + P_T[D:]`` to every
   value row, before splitting heads. The same prompts are used at every layer.
4. The final-norm CLS row ``z`` feeds the task head. Predictions are
   ``sigmoid(W_t z + b_t)``.

Because one vector is added to every key row, it shifts each query's scores by
a constant. Softmax cancels that shift, so the key half of a prompt has no
effect on the output and its gradient is zero. Only the value half matters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dcl import build_pairs, dcl_loss
from .ept import (MATERIALIZE_BUDGET, indices_from_mask, make_bank)
from .errors import ConfigError, ShapeError, ValidationError
from .numcore import ParamTensor, sigmoid, softmax_rows, uniform_fan_in

LN_EPS = 1e-5
PROB_CLAMP = 1e-7
_GELU_C = np.sqrt(2.0 / np.pi)


# Elementwise pieces ----------------------------------------------------------

def layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * gamma + beta, (xh, inv)


def layer_norm_backward(dy, gamma, cache):
    xh, inv = cache
    dxh = dy * gamma
    return inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                  - xh * (dxh * xh).mean(axis=-1, keepdims=True))


def gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def split_prompt(p):
    p = np.asarray(p)
    d = p.shape[-1]
    if d % 2:
        raise ConfigError(f"prompt length {d} must be even to split into key/value halves")
    return p[..., : d // 2], p[..., d // 2:]


def bce_loss(probs, labels):
    """Mean clamped binary cross-entropy and its gradient w.r.t. the logits.

    Entries whose probability was clamped get zero gradient, matching the
    derivative of the clamped expression.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ShapeError(f"probs shape {probs.shape} != labels shape {labels.shape}")
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    count = max(p.size, 1)
    loss = -np.sum(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)) / count
    inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    grad = np.where(inside, (probs - labels) / count, 0.0)
    return float(loss), grad


def total_loss(bce: float, dcl: float, lam: float) -> float:
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    return bce + lam * dcl


# Backbone --------------------------------------------------------------------

_LAYER_KEYS = ("ln1.gamma", "ln1.beta", "qkv.weight", "qkv.bias", "out.weight", "out.bias",
               "ln2.gamma", "ln2.beta", "mlp1.weight", "mlp1.bias", "mlp2.weight", "mlp2.bias")


class Backbone:
    """Frozen pre-norm transformer stack. Weights are stored as ``(in, out)``."""

    def __init__(self, width: int, n_layers: int, n_heads: int, rng: np.random.Generator | None = None):
        if width % n_heads:
            raise ConfigError(f"model width {width} not divisible by {n_heads} heads")
        self.width, self.n_heads = width, n_heads
        D = width
        self.layers: list[dict[str, ParamTensor]] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for _ in range(n_layers):
            shapes = {
                "ln1.gamma": np.ones(D), "ln1.beta": np.zeros(D),
                "qkv.weight": uniform_fan_in(rng, (D, 3 * D), D), "qkv.bias": uniform_fan_in(rng, 3 * D, D),
                "out.weight": uniform_fan_in(rng, (D, D), D), "out.bias": uniform_fan_in(rng, D, D),
                "ln2.gamma": np.ones(D), "ln2.beta": np.zeros(D),
                "mlp1.weight": uniform_fan_in(rng, (D, 4 * D), D), "mlp1.bias": uniform_fan_in(rng, 4 * D, D),
                "mlp2.weight": uniform_fan_in(rng, (4 * D, D), 4 * D), "mlp2.bias": uniform_fan_in(rng, D, 4 * D),
            }
            self.layers.append({k: ParamTensor(shapes[k], frozen=True) for k in _LAYER_KEYS})
        self.cls = ParamTensor(rng.normal(0.0, 0.02, size=D), frozen=True)
        self.ln_f = {"gamma": ParamTensor(np.ones(D), frozen=True), "beta": ParamTensor(np.zeros(D), frozen=True)}

    def named_params(self):
        out = {"cls": self.cls}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": p for k, p in layer.items()})
        out.update({f"ln_f.{k}": p for k, p in self.ln_f.items()})
        return out

    def _heads(self, x):
        B, L, D = x.shape
        return x.reshape(B, L, self.n_heads, D // self.n_heads).transpose(0, 2, 1, 3)

    def _merge(self, x):
        B, H, L, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)

    def forward(self, x, p_key=None, p_value=None):
        """Run all layers on ``x`` (``B x L x D``); returns the final-norm output and caches."""
        scale = 1.0 / np.sqrt(self.width // self.n_heads)
        caches = []
        for P in self.layers:
            p = {k: v.value for k, v in P.items()}
            a, ln1 = layer_norm(x, p["ln1.gamma"], p["ln1.beta"])
            qkv = a @ p["qkv.weight"] + p["qkv.bias"]
            q, k, v = np.split(qkv, 3, axis=-1)
            if p_key is not None:
                k = k + p_key[:, None, :]
                v = v + p_value[:, None, :]
            qh, kh, vh = self._heads(q), self._heads(k), self._heads(v)
            att = softmax_rows(qh @ kh.swapaxes(-1, -2) * scale)
            o = self._merge(att @ vh)
            x1 = x + o @ p["out.weight"] + p["out.bias"]
            c, ln2 = layer_norm(x1, p["ln2.gamma"], p["ln2.beta"])
            u = c @ p["mlp1.weight"] + p["mlp1.bias"]
            gu, t = gelu(u)
            x = x1 + gu @ p["mlp2.weight"] + p["mlp2.bias"]
            caches.append(dict(ln1=ln1, q=q, qh=qh, kh=kh, vh=vh, att=att, ln2=ln2, u=u, t=t))
        out, lnf = layer_norm(x, self.ln_f["gamma"].value, self.ln_f["beta"].value)
        return out, (caches, lnf)

    def backward(self, dout, cache, want_prompts: bool):
        """Gradient w.r.t. the layer input and (optionally) the shared prompt halves."""
        caches, lnf = cache
        scale = 1.0 / np.sqrt(self.width // self.n_heads)
        dx = layer_norm_backward(dout, self.ln_f["gamma"].value, lnf)
        B, _, D = dout.shape
        dpk = np.zeros((B, D)) if want_prompts else None
        dpv = np.zeros((B, D)) if want_prompts else None
        for P, c in zip(reversed(self.layers), reversed(caches)):
            p = {k: v.value for k, v in P.items()}
            dgu = dx @ p["mlp2.weight"].T
            du = dgu * gelu_grad(c["u"], c["t"])
            dx1 = dx + layer_norm_backward(du @ p["mlp1.weight"].T, p["ln2.gamma"], c["ln2"])
            doh = self._heads(dx1 @ p["out.weight"].T)
            att = c["att"]
            datt = doh @ c["vh"].swapaxes(-1, -2)
            dvh = att.swapaxes(-1, -2) @ doh
            dsc = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * scale
            dq = self._merge(dsc @ c["kh"])
            dk = self._merge(dsc.swapaxes(-1, -2) @ c["qh"])
            dv = self._merge(dvh)
            if want_prompts:
                dpk += dk.sum(axis=1)
                dpv += dv.sum(axis=1)
            da = np.concatenate([dq, dk, dv], axis=-1) @ p["qkv.weight"].T
            dx = dx1 + layer_norm_backward(da, p["ln1.gamma"], c["ln1"])
        return dx, dpk, dpv


# Full model ------------------------------------------------------------------

@dataclass
class ModelConfig:
    view_dims: list[int]
    d: int = 128
    n_layers: int = 3
    n_heads: int = 4
    k: int = 4
    ranks: int | list[int] = 2
    bank: str = "ept"
    use_prompts: bool = True

    @property
    def width(self) -> int:
        return self.d // 2

    @property
    def n_views(self) -> int:
        return len(self.view_dims)

    def validate(self):
        if self.d % 2:
            raise ConfigError(f"prompt length d={self.d} must be even")
        if self.width % self.n_heads:
            raise ConfigError(f"model width d/2={self.width} not divisible by n_heads={self.n_heads}")
        if self.n_views < 1 or min(self.view_dims) < 1:
            raise ConfigError("need at least one view with positive feature dimension")


@dataclass
class Batch:
    feats: list[np.ndarray]
    mask: np.ndarray
    labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.mask.shape[0]


@dataclass
class ForwardOut:
    z: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    task: int
    cache: dict = field(repr=False, default_factory=dict)


class PromptModel:
    """View encoders, frozen backbone, prompt bank, task prompts and task heads."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        D, n = config.width, config.n_views
        self.encoders = [
            {"weight": ParamTensor(uniform_fan_in(rng, (D, dv), dv)),
             "bias": ParamTensor(uniform_fan_in(rng, D, dv))}
            for dv in config.view_dims
        ]
        self.backbone = Backbone(D, config.n_layers, config.n_heads, rng)
        self.bank = make_bank(config.bank, n, config.d, config.k, config.ranks, rng)
        self.view_weights = ParamTensor(np.zeros(n))
        self.task_prompts: list[ParamTensor] = []
        self.heads: list[dict[str, ParamTensor]] = []
        self._rng = rng

    # registry ---------------------------------------------------------------
    @property
    def n_tasks(self) -> int:
        return len(self.task_prompts)

    def add_task(self, n_classes: int, rng: np.random.Generator | None = None) -> int:
        rng = rng if rng is not None else self._rng
        D = self.config.width
        self.task_prompts.append(ParamTensor(rng.normal(0.0, 0.02, size=self.config.d)))
        self.heads.append({"weight": ParamTensor(uniform_fan_in(rng, (n_classes, D), D)),
                           "bias": ParamTensor(uniform_fan_in(rng, n_classes, D))})
        return self.n_tasks - 1

    def named_params(self) -> dict[str, ParamTensor]:
        out = {}
        for v, enc in enumerate(self.encoders):
            out.update({f"encoders.{v}.{k}": p for k, p in enc.items()})
        out.update({f"backbone.{k}": p for k, p in self.backbone.named_params().items()})
        out.update({f"bank.{k}": p for k, p in self.bank.named_params().items()})
        out["dcl.w"] = self.view_weights
        for t, p in enumerate(self.task_prompts):
            out[f"prompts.{t}"] = p
        for t, head in enumerate(self.heads):
            out.update({f"heads.{t}.{k}": p for k, p in head.items()})
        return out

    # forward ----------------------------------------------------------------
    def _imputed(self, batch: Batch):
        n = self.config.n_views
        mask = np.asarray(batch.mask)
        if mask.ndim != 2 or mask.shape[1] != n or len(batch.feats) != n:
            raise ShapeError(f"batch has {len(batch.feats)} views / mask {mask.shape}; model has {n} views")
        if np.any(mask.sum(axis=1) == 0):
            raise ValidationError("sample with all views missing")
        xs = []
        for v, (x, dv) in enumerate(zip(batch.feats, self.config.view_dims)):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2 or x.shape[1] != dv:
                raise ShapeError(f"view {v}: feature length {x.shape[-1]} != encoder input {dv}")
            xs.append(np.where(mask[:, v:v + 1] > 0, x, 0.0))
        return xs, mask

    def encode_views(self, batch: Batch):
        xs, _ = self._imputed(batch)
        return [x @ enc["weight"].value.T + enc["bias"].value for x, enc in zip(xs, self.encoders)]

    def build_sequence(self, hs) -> np.ndarray:
        B = hs[0].shape[0]
        cls = np.broadcast_to(self.backbone.cls.value, (B, 1, self.config.width))
        return np.concatenate([cls] + [h[:, None, :] for h in hs], axis=1)

    def sample_prompts(self, pattern_idx: np.ndarray, task: int):
        """Per-sample key/value prompt halves, or ``None`` when prompts are ablated."""
        if not self.config.use_prompts:
            return None, None, None
        uniq, inv = np.unique(pattern_idx, return_inverse=True)
        pm = self.bank.prompts(uniq).T[inv]
        p = pm + self.task_prompts[task].value
        pk, pv = split_prompt(p)
        return pk, pv, (uniq, inv)

    def forward(self, batch: Batch, task: int) -> ForwardOut:
        if not 0 <= task < self.n_tasks:
            raise ValidationError(f"unknown task {task}; {self.n_tasks} registered")
        xs, mask = self._imputed(batch)
        hs = [x @ enc["weight"].value.T + enc["bias"].value for x, enc in zip(xs, self.encoders)]
        seq = self.build_sequence(hs)
        pidx = indices_from_mask(mask)
        pk, pv, groups = self.sample_prompts(pidx, task)
        out, bcache = self.backbone.forward(seq, pk, pv)
        z = out[:, 0, :]
        head = self.heads[task]
        logits = z @ head["weight"].value.T + head["bias"].value
        return ForwardOut(z, logits, sigmoid(logits), task,
                          dict(xs=xs, bb=bcache, groups=groups, out_shape=out.shape))

    # backward ---------------------------------------------------------------
    def backward(self, fwd: ForwardOut, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for every non-frozen parameter reachable from the logits.

        Bank gradients are reported per-pattern under ``"_bank_upstream"`` as
        ``(pattern indices, d x P upstream)`` so callers can merge them with
        the contrastive term before the single bank backward pass.
        """
        t = fwd.task
        head = self.heads[t]
        grads: dict[str, np.ndarray] = {}
        if not head["weight"].frozen:
            grads[f"heads.{t}.weight"] = dlogits.T @ fwd.z
            grads[f"heads.{t}.bias"] = dlogits.sum(axis=0)
        need_prompt = self.config.use_prompts and (
            not self.task_prompts[t].frozen
            or any(not p.frozen for p in self.bank.named_params().values()))
        need_enc = any(not enc["weight"].frozen for enc in self.encoders)
        if not (need_prompt or need_enc):
            return grads
        dout = np.zeros(fwd.cache["out_shape"])
        dout[:, 0, :] = dlogits @ head["weight"].value
        dseq, dpk, dpv = self.backbone.backward(dout, fwd.cache["bb"], want_prompts=need_prompt)
        if need_enc:
            for v, (x, enc) in enumerate(zip(fwd.cache["xs"], self.encoders)):
                if enc["weight"].frozen:
                    continue
                dh = dseq[:, 1 + v, :]
                grads[f"encoders.{v}.weight"] = dh.T @ x
                grads[f"encoders.{v}.bias"] = dh.sum(axis=0)
        if need_prompt:
            dp = np.concatenate([dpk, dpv], axis=1)
            if not self.task_prompts[t].frozen:
                grads[f"prompts.{t}"] = dp.sum(axis=0)
            uniq, inv = fwd.cache["groups"]
            onehot = np.zeros((inv.size, uniq.size))
            onehot[np.arange(inv.size), inv] = 1.0
            grads["_bank_upstream"] = (uniq, dp.T @ onehot)
        return grads


def forward_task(model: PromptModel, batch: Batch, task: int):
    out = model.forward(batch, task)
    return out.z, out.logits, out.probs


# Loss + gradients for one training step ---------------------------------------

@dataclass
class StepResult:
    total: float
    bce: float
    dcl: float
    grads: dict[str, np.ndarray]


def dcl_patterns(model: PromptModel, batch_patterns: np.ndarray, subsample: int,
                 rng: np.random.Generator | None) -> np.ndarray:
    """Pattern set for the contrastive term: every nonzero pattern when the
    bank can be materialized, else a uniform subsample plus the batch's own."""
    n, d = model.config.n_views, model.config.d
    if (1 << n) * d <= MATERIALIZE_BUDGET:
        return np.arange(1, 1 << n, dtype=np.int64)
    if rng is None:
        raise ConfigError("pattern subsampling needs an rng")
    draw = rng.integers(1, 1 << n, size=subsample, dtype=np.int64)
    return np.unique(np.concatenate([draw, np.asarray(batch_patterns, dtype=np.int64)]))


def backward_step(model: PromptModel, batch: Batch, task: int, lam: float = 1e-3, alpha: float = 1.0,
                  weighted_positive: bool = False, subsample: int = 128,
                  rng: np.random.Generator | None = None) -> StepResult:
    """Total loss ``BCE + lam * DCL`` and gradients for all non-frozen parameters."""
    if batch.size == 0:
        raise ValidationError("empty batch")
    fwd = model.forward(batch, task)
    bce, dlogits = bce_loss(fwd.probs, batch.labels)
    grads = model.backward(fwd, dlogits)
    bank_params = model.bank.named_params()
    bank_live = model.config.use_prompts and any(not p.frozen for p in bank_params.values())
    w_live = not model.view_weights.frozen

    dcl_value = 0.0
    upstream = grads.pop("_bank_upstream", None)
    if model.config.use_prompts and lam > 0:
        pats = dcl_patterns(model, indices_from_mask(batch.mask), subsample, rng)
        pairs = build_pairs(pats, model.view_weights.value)
        res = dcl_loss(model.bank.prompts(pairs.patterns), pairs, alpha,
                       w=model.view_weights.value, weighted_positive=weighted_positive)
        dcl_value = res.loss
        if bank_live:
            extra = (pairs.patterns, lam * res.grad_prompts)
            upstream = extra if upstream is None else (
                np.concatenate([upstream[0], extra[0]]), np.concatenate([upstream[1], extra[1]], axis=1))
        if w_live:
            grads["dcl.w"] = lam * res.grad_w
    elif w_live:
        grads["dcl.w"] = np.zeros_like(model.view_weights.value)  # term disabled

    if bank_live and upstream is not None:
        uniq, inv = np.unique(upstream[0], return_inverse=True)
        merged = np.zeros((model.config.d, uniq.size))
        np.add.at(merged.T, inv, upstream[1].T)
        for name, g in model.bank.backward(uniq, merged).items():
            if not bank_params[name].frozen:
                grads[f"bank.{name}"] = g
    return StepResult(total_loss(bce, dcl_value, lam), bce, dcl_value, grads)


def loss_only(model: PromptModel, batch: Batch, task: int, lam: float = 1e-3, alpha: float = 1.0,
              weighted_positive: bool = False) -> float:
    """Forward-only total loss (same definition as :func:`backward_step`)."""
    fwd = model.forward(batch, task)
    bce, _ = bce_loss(fwd.probs, batch.labels)
    dcl_value = 0.0
    if model.config.use_prompts and lam > 0:
        pats = dcl_patterns(model, indices_from_mask(batch.mask), 0, None)
        pairs = build_pairs(pats, model.view_weights.value)
        dcl_value = dcl_loss(model.bank.prompts(pairs.patterns), pairs, alpha,
                             w=model.view_weights.value, weighted_positive=weighted_positive).loss
    return total_loss(bce, dcl_value, lam)
