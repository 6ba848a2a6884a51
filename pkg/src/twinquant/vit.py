"""A small seeded vision transformer used as the quantization subject.

Layout: patch embedding -> ``blocks`` x (LN, MSA, residual, LN, MLP,
residual) -> LN -> mean pool over patches -> classifier. Every matrix
product is a *layer* ``O = A @ B`` whose two operands are quantization
*sites*. Fully-connected layers multiply the activation (A) by the weight
(B, stored ``[in, out]``); attention products are split per head.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import DimensionError, UnknownSiteError
from .quant import quantized_matmul

LN_EPS = 1e-5
INIT_STD = 0.02


class SiteKind(enum.Enum):
    FC_WEIGHT = "fc_weight"
    FC_INPUT = "fc_input"
    MATMUL_A = "matmul_a"
    MATMUL_B = "matmul_b"


class ActClass(enum.Enum):
    GENERIC = "generic"
    POST_SOFTMAX = "post_softmax"
    POST_GELU = "post_gelu"


@dataclass(frozen=True)
class ModelConfig:
    num_patches: int = 16
    patch_dim: int = 16
    hidden: int = 32
    heads: int = 4
    blocks: int = 2
    mlp_ratio: int = 4
    classes: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("num_patches", "patch_dim", "hidden", "heads", "blocks", "mlp_ratio", "classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def mlp_hidden(self) -> int:
        return self.hidden * self.mlp_ratio


@dataclass(frozen=True)
class QuantizableLayer:
    """One quantization site: an operand of a layer's matrix product."""

    id: str
    layer: str
    kind: SiteKind
    act_class: ActClass = ActClass.GENERIC
    head: int | None = None

    @property
    def operand(self) -> str:
        return "A" if self.kind in (SiteKind.FC_INPUT, SiteKind.MATMUL_A) else "B"


@dataclass(frozen=True)
class Layer:
    id: str
    a: QuantizableLayer
    b: QuantizableLayer
    head: int | None = None

    @property
    def is_fc(self) -> bool:
        return self.b.kind is SiteKind.FC_WEIGHT


def _fc(layer_id: str, act=ActClass.GENERIC) -> Layer:
    return Layer(
        layer_id,
        QuantizableLayer(f"{layer_id}:activation", layer_id, SiteKind.FC_INPUT, act),
        QuantizableLayer(f"{layer_id}:weight", layer_id, SiteKind.FC_WEIGHT),
    )


def _mm(layer_id: str, head: int, act=ActClass.GENERIC) -> Layer:
    return Layer(
        layer_id,
        QuantizableLayer(f"{layer_id}:A", layer_id, SiteKind.MATMUL_A, act, head),
        QuantizableLayer(f"{layer_id}:B", layer_id, SiteKind.MATMUL_B, ActClass.GENERIC, head),
        head,
    )


def build_layers(cfg: ModelConfig) -> list[Layer]:
    """All matmul layers in topological order."""
    layers = [_fc("patch_embed")]
    for i in range(cfg.blocks):
        p = f"blocks.{i}"
        layers += [_fc(f"{p}.attn.q"), _fc(f"{p}.attn.k"), _fc(f"{p}.attn.v")]
        layers += [_mm(f"{p}.attn.matmul_qk.h{h}", h) for h in range(cfg.heads)]
        layers += [_mm(f"{p}.attn.matmul_pv.h{h}", h, ActClass.POST_SOFTMAX) for h in range(cfg.heads)]
        layers += [_fc(f"{p}.attn.proj"), _fc(f"{p}.mlp.fc1"), _fc(f"{p}.mlp.fc2", ActClass.POST_GELU)]
    layers.append(_fc("head"))
    return layers


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    D, N = cfg.hidden, cfg.num_patches
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, D),
        "patch_embed.bias": (D,),
        "pos_embed": (N, D),
    }
    for i in range(cfg.blocks):
        p = f"blocks.{i}"
        shapes[f"{p}.norm1.weight"] = (D,)
        shapes[f"{p}.norm1.bias"] = (D,)
        for name in ("q", "k", "v", "proj"):
            shapes[f"{p}.attn.{name}.weight"] = (D, D)
            shapes[f"{p}.attn.{name}.bias"] = (D,)
        shapes[f"{p}.norm2.weight"] = (D,)
        shapes[f"{p}.norm2.bias"] = (D,)
        shapes[f"{p}.mlp.fc1.weight"] = (D, cfg.mlp_hidden)
        shapes[f"{p}.mlp.fc1.bias"] = (cfg.mlp_hidden,)
        shapes[f"{p}.mlp.fc2.weight"] = (cfg.mlp_hidden, D)
        shapes[f"{p}.mlp.fc2.bias"] = (D,)
    shapes["norm.weight"] = (D,)
    shapes["norm.bias"] = (D,)
    shapes["head.weight"] = (D, cfg.classes)
    shapes["head.bias"] = (cfg.classes,)
    return shapes


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            self.layers = build_layers(self.cfg)
        self._layer_index = {l.id: l for l in self.layers}
        self._site_index = {s.id: s for l in self.layers for s in (l.a, l.b)}
        for v in self.params.values():
            v.setflags(write=False)

    @property
    def sites(self) -> list[QuantizableLayer]:
        return [s for l in self.layers for s in (l.a, l.b)]

    def layer(self, layer_id: str) -> Layer:
        try:
            return self._layer_index[layer_id]
        except KeyError:
            raise UnknownSiteError(f"unknown layer {layer_id!r}") from None

    def site(self, site_id: str) -> QuantizableLayer:
        try:
            return self._site_index[site_id]
        except KeyError:
            raise UnknownSiteError(f"unknown site {site_id!r}") from None

    def with_params(self, params: dict[str, np.ndarray]) -> "Model":
        return Model(self.cfg, {k: np.array(v, dtype=np.float64) for k, v in params.items()})


def build_model(cfg: ModelConfig) -> Model:
    """Weights ~ N(0, 0.02^2) from ``cfg.seed``; biases 0; norm scales 1."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape)
        elif ".norm" in name or name.startswith("norm."):
            params[name] = np.ones(shape)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
    return Model(cfg, params)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class Trace:
    """Everything a forward pass produced: logits, layer outputs and operands."""

    logits: np.ndarray
    taps: dict[str, np.ndarray]
    operands: dict[str, tuple[np.ndarray, np.ndarray]]
    saved: dict[str, np.ndarray]


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = T.as_tensor(x)
    cfg = model.cfg
    if x.ndim != 3 or x.shape[1:] != (cfg.num_patches, cfg.patch_dim):
        raise DimensionError(
            f"input must be [S, {cfg.num_patches}, {cfg.patch_dim}], got {x.shape}"
        )
    return x


def run(model: Model, x, matmul_fn=None, perturb: dict | None = None) -> Trace:
    """Forward pass.

    ``matmul_fn(layer_id, a, b)`` replaces each layer product (the FP
    product by default). ``perturb`` adds a tensor to selected layer outputs,
    which is how finite-difference probes reach the tapped outputs.
    """
    x = _check_input(model, x)
    cfg = model.cfg
    P = model.params
    H, d = cfg.heads, cfg.head_dim
    taps: dict[str, np.ndarray] = {}
    operands: dict[str, tuple] = {}
    saved: dict[str, np.ndarray] = {"x": x}
    perturb = perturb or {}

    def mm(layer_id, a, b):
        operands[layer_id] = (a, b)
        o = T.matmul(a, b) if matmul_fn is None else matmul_fn(layer_id, a, b)
        if layer_id in perturb:
            o = o + perturb[layer_id]
        taps[layer_id] = o
        return o

    h = mm("patch_embed", x, P["patch_embed.weight"]) + P["patch_embed.bias"]
    h = h + P["pos_embed"]
    for i in range(cfg.blocks):
        p = f"blocks.{i}"
        saved[f"{p}.in"] = h
        u = T.layernorm(h, P[f"{p}.norm1.weight"], P[f"{p}.norm1.bias"], LN_EPS)
        q = mm(f"{p}.attn.q", u, P[f"{p}.attn.q.weight"]) + P[f"{p}.attn.q.bias"]
        k = mm(f"{p}.attn.k", u, P[f"{p}.attn.k.weight"]) + P[f"{p}.attn.k.bias"]
        v = mm(f"{p}.attn.v", u, P[f"{p}.attn.v.weight"]) + P[f"{p}.attn.v.bias"]
        heads_out = []
        for j in range(H):
            sl = slice(j * d, (j + 1) * d)
            qh, kh, vh = q[..., sl], k[..., sl], v[..., sl]
            s = mm(f"{p}.attn.matmul_qk.h{j}", qh, T.transpose(kh))
            prob = T.softmax_rows(s / math.sqrt(d))
            saved[f"{p}.attn.prob.h{j}"] = prob
            heads_out.append(mm(f"{p}.attn.matmul_pv.h{j}", prob, vh))
        cat = np.concatenate(heads_out, axis=-1)
        attn = mm(f"{p}.attn.proj", cat, P[f"{p}.attn.proj.weight"]) + P[f"{p}.attn.proj.bias"]
        h = h + attn
        saved[f"{p}.mid"] = h
        u2 = T.layernorm(h, P[f"{p}.norm2.weight"], P[f"{p}.norm2.bias"], LN_EPS)
        z = mm(f"{p}.mlp.fc1", u2, P[f"{p}.mlp.fc1.weight"]) + P[f"{p}.mlp.fc1.bias"]
        saved[f"{p}.mlp.pre"] = z
        g = T.gelu(z)
        y = mm(f"{p}.mlp.fc2", g, P[f"{p}.mlp.fc2.weight"]) + P[f"{p}.mlp.fc2.bias"]
        h = h + y
    saved["final"] = h
    hf = T.layernorm(h, P["norm.weight"], P["norm.bias"], LN_EPS)
    pooled = hf.mean(axis=1)
    logits = mm("head", pooled, P["head.weight"]) + P["head.bias"]
    return Trace(logits, taps, operands, saved)


def forward(model: Model, x):
    """FP logits ``[S, C]`` and the raw output of every layer product."""
    tr = run(model, x)
    return tr.logits, tr.taps


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, target) -> np.ndarray:
    """Per-sample ``CE(softmax(logits), target)`` for target distributions."""
    return -(np.asarray(target) * log_softmax(np.asarray(logits))).sum(axis=-1)


def backward(model: Model, tr: Trace, target) -> tuple[dict, dict]:
    """Gradients of ``L = sum_s CE(softmax(logits_s), target_s)``.

    Returns ``(tap_grads, param_grads)``: the gradient w.r.t. every layer
    output and w.r.t. every parameter.
    """
    cfg = model.cfg
    P = model.params
    H, d = cfg.heads, cfg.head_dim
    target = T.as_tensor(target)
    if target.shape != tr.logits.shape:
        raise DimensionError(f"target {target.shape} does not match logits {tr.logits.shape}")
    tg: dict[str, np.ndarray] = {}
    pg: dict[str, np.ndarray] = {}

    def fc_back(layer_id, dout):
        tg[layer_id] = dout
        a, w = tr.operands[layer_id]
        da, dw = T.vjp_matmul(a, w, dout)
        pg[f"{layer_id}.weight"] = dw
        pg[f"{layer_id}.bias"] = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        return da

    dlogits = T.softmax_rows(tr.logits) - target
    dpooled = fc_back("head", dlogits)
    N = cfg.num_patches
    dhf = np.repeat(dpooled[:, None, :] / N, N, axis=1)
    dh, pg["norm.weight"], pg["norm.bias"] = T.vjp_layernorm(
        tr.saved["final"], P["norm.weight"], P["norm.bias"], dhf, LN_EPS
    )
    for i in reversed(range(cfg.blocks)):
        p = f"blocks.{i}"
        dg = fc_back(f"{p}.mlp.fc2", dh)
        dz = T.vjp_gelu(tr.saved[f"{p}.mlp.pre"], dg)
        du2 = fc_back(f"{p}.mlp.fc1", dz)
        dmid, pg[f"{p}.norm2.weight"], pg[f"{p}.norm2.bias"] = T.vjp_layernorm(
            tr.saved[f"{p}.mid"], P[f"{p}.norm2.weight"], P[f"{p}.norm2.bias"], du2, LN_EPS
        )
        dh = dh + dmid
        dcat = fc_back(f"{p}.attn.proj", dh)
        dq = np.zeros_like(dcat)
        dk = np.zeros_like(dcat)
        dv = np.zeros_like(dcat)
        for j in range(H):
            sl = slice(j * d, (j + 1) * d)
            pv = f"{p}.attn.matmul_pv.h{j}"
            dhead = dcat[..., sl]
            tg[pv] = dhead
            prob, vh = tr.operands[pv]
            dprob, dv[..., sl] = T.vjp_matmul(prob, vh, dhead)
            ds = T.vjp_softmax_rows(tr.saved[f"{p}.attn.prob.h{j}"], dprob) / math.sqrt(d)
            qk = f"{p}.attn.matmul_qk.h{j}"
            tg[qk] = ds
            qh, kt = tr.operands[qk]
            dq[..., sl], dkt = T.vjp_matmul(qh, kt, ds)
            dk[..., sl] = T.vjp_transpose(T.transpose(kt), dkt)
        du = fc_back(f"{p}.attn.q", dq) + fc_back(f"{p}.attn.k", dk) + fc_back(f"{p}.attn.v", dv)
        din, pg[f"{p}.norm1.weight"], pg[f"{p}.norm1.bias"] = T.vjp_layernorm(
            tr.saved[f"{p}.in"], P[f"{p}.norm1.weight"], P[f"{p}.norm1.bias"], du, LN_EPS
        )
        dh = dh + din
    pg["pos_embed"] = dh.sum(axis=0)
    fc_back("patch_embed", dh)
    return tg, pg


def loss(model: Model, x, target, perturb=None) -> float:
    tr = run(model, x, perturb=perturb)
    return float(cross_entropy(tr.logits, target).sum())


def backward_output_grads(model: Model, x, y_fp) -> dict[str, np.ndarray]:
    """``dL/dO`` for every layer output, ``L = sum_s CE(softmax(logits_s), y_fp_s)``."""
    tr = run(model, x)
    tg, _ = backward(model, tr, y_fp)
    return tg


def hard_targets(logits) -> np.ndarray:
    """One-hot rows at the argmax of ``logits``."""
    logits = np.asarray(logits)
    out = np.zeros_like(logits, dtype=np.float64)
    out[np.arange(len(logits)), logits.argmax(axis=-1)] = 1.0
    return out


def check_params_map(model: Model, params: dict) -> None:
    for sid in params:
        model.site(sid)


def forward_quantized(model: Model, x, params: dict, kernel: str = "integer") -> np.ndarray:
    """Logits with each covered site quantized; other sites, softmax and norms stay f64."""
    check_params_map(model, params)

    def qmm(layer_id, a, b):
        layer = model.layer(layer_id)
        pa = params.get(layer.a.id)
        pb = params.get(layer.b.id)
        if pa is None and pb is None:
            return T.matmul(a, b)
        return quantized_matmul(a, b, pa, pb, kernel)

    return run(model, x, matmul_fn=qmm).logits


def predict(model: Model, x, params: dict | None = None, batch: int = 256) -> np.ndarray:
    x = T.as_tensor(x)
    out = []
    for i in range(0, len(x), batch):
        xb = x[i : i + batch]
        out.append(forward(model, xb)[0] if not params else forward_quantized(model, xb, params))
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.classes))


def accuracy(model: Model, x, y, params: dict | None = None) -> float:
    logits = predict(model, x, params)
    return float(np.mean(logits.argmax(axis=-1) == np.asarray(y)))


# ---------------------------------------------------------------------------
# synthetic task and training
# ---------------------------------------------------------------------------


def class_prototypes(cfg: ModelConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919])
    return rng.normal(0.0, 1.0, size=(cfg.classes, cfg.patch_dim))


def make_dataset(cfg: ModelConfig, n: int, seed: int, split: int, noise: float = 1.5, obj_patches: int = 4):
    """Synthetic patch "images".

    Each sample places its class pattern on ``obj_patches`` random patches
    over Gaussian background noise. Patterns depend only on ``seed``;
    ``split`` selects an independent stream of samples (train / calibration
    / eval).
    """
    protos = class_prototypes(cfg, seed)
    rng = np.random.default_rng([seed, split])
    y = rng.integers(0, cfg.classes, size=n)
    x = noise * rng.normal(size=(n, cfg.num_patches, cfg.patch_dim))
    where = np.argsort(rng.random((n, cfg.num_patches)), axis=1)[:, :obj_patches]
    rows = np.arange(n)[:, None]
    x[rows, where] += protos[y][:, None, :]
    return x, y


def train(
    model: Model,
    x,
    y,
    epochs: int,
    lr: float = 0.05,
    momentum: float = 0.9,
    batch: int = 64,
    seed: int = 0,
) -> Model:
    """Mini-batch SGD with momentum on mean cross-entropy; returns a new model."""
    params = {k: v.copy() for k, v in model.params.items()}
    vel = {k: np.zeros_like(v) for k, v in params.items()}
    x = T.as_tensor(x)
    y = np.asarray(y)
    onehot = np.eye(model.cfg.classes)[y]
    rng = np.random.default_rng([seed, 104729])
    current = model
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), batch):
            idx = order[i : i + batch]
            tr = run(current, x[idx])
            _, pg = backward(current, tr, onehot[idx])
            for k in params:
                vel[k] = momentum * vel[k] - lr * pg[k] / len(idx)
                params[k] = params[k] + vel[k]
            current = replace(current, params={k: v.copy() for k, v in params.items()}, layers=[])
    return current


TRAIN_SPLIT = 100
CALIB_SPLIT = 2
EVAL_SPLIT = 3


def fit(
    model: Model,
    epochs: int,
    data_seed: int,
    train_size: int = 4000,
    lr: float = 0.05,
    noise: float = 1.5,
) -> Model:
    """Train on a fresh synthetic draw every epoch.

    The step size drops to ``lr / 5`` for the last third of the epochs.
    Fresh samples keep the model from memorizing a fixed training set, so
    it converges toward the task optimum rather than overfitting.
    """
    cfg = model.cfg
    for e in range(epochs):
        x, y = make_dataset(cfg, train_size, data_seed, TRAIN_SPLIT + e, noise=noise)
        step = lr if 3 * e < 2 * epochs else lr / 5
        model = train(model, x, y, 1, lr=step, seed=e)
    return model
