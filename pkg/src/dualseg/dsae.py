"""Stacked sparse autoencoders with a parametric-bias final layer.

Each layer maps v -> h = tanh(W_e v + b_e) and reconstructs
r = tanh(W_d h + b_d).  The training objective is mean squared
reconstruction error plus L2 weight decay and a KL sparsity penalty on
the batch-mean activations (rescaled from (-1,1) to (0,1)).

The final layer may carry a parametric-bias partition: the input is the
concatenation (x, p) of features and a speaker code, the hidden layer the
concatenation (z, s), and the weight blocks p->z (encoder) and z->p
(decoder) are structurally zero, so z can never see the speaker code and
the code must be reconstructed from s alone.
"""

from dataclasses import dataclass, field

import numpy as np

from .docio import load_doc, save_doc

_HBAR_EPS = 1e-6


class DsaeError(Exception):
    pass


@dataclass
class SaeHyper:
    alpha: float = 0.003   # L2 weight decay
    beta: float = 0.7      # sparsity penalty weight
    eta: float = 0.5       # sparsity target in (0, 1)

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise DsaeError("eta must lie strictly inside (0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise DsaeError("alpha and beta must be nonnegative")


@dataclass
class TrainSchedule:
    learning_rate: float = 0.05
    epochs: int = 2000
    seed: int = 0


@dataclass
class SaeLayer:
    w_e: np.ndarray            # D_H x D_V
    b_e: np.ndarray            # D_H
    w_d: np.ndarray            # D_V x D_H
    b_d: np.ndarray            # D_V
    hyper: SaeHyper
    mask_e: np.ndarray | None = None   # 0/1, zeros mark structurally-zero entries
    mask_d: np.ndarray | None = None

    def __post_init__(self):
        for name in ("w_e", "b_e", "w_d", "b_d"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if not np.all(np.isfinite(arr)):
                raise DsaeError(f"{name} contains non-finite entries")
        dh, dv = self.w_e.shape
        if self.b_e.shape != (dh,) or self.w_d.shape != (dv, dh) or self.b_d.shape != (dv,):
            raise DsaeError("inconsistent layer shapes")
        for name in ("mask_e", "mask_d"):
            mask = getattr(self, name)
            if mask is not None:
                setattr(self, name, np.asarray(mask, dtype=np.float64))

    @property
    def d_v(self):
        return self.w_e.shape[1]

    @property
    def d_h(self):
        return self.w_e.shape[0]

    def apply_masks(self):
        if self.mask_e is not None:
            self.w_e *= self.mask_e
        if self.mask_d is not None:
            self.w_d *= self.mask_d

    def copy(self):
        return SaeLayer(self.w_e.copy(), self.b_e.copy(), self.w_d.copy(),
                        self.b_d.copy(), self.hyper,
                        None if self.mask_e is None else self.mask_e.copy(),
                        None if self.mask_d is None else self.mask_d.copy())


@dataclass
class PbhlLayer:
    """A masked SaeLayer over (x, p) -> (z, s) with zero p->z and z->p blocks."""

    layer: SaeLayer
    d_x: int
    d_p: int
    d_z: int
    d_s: int

    def __post_init__(self):
        if self.d_x + self.d_p != self.layer.d_v:
            raise DsaeError("partition D_X + D_P must equal the layer input size")
        if self.d_z + self.d_s != self.layer.d_h:
            raise DsaeError("partition D_Z + D_S must equal the layer hidden size")
        if self.layer.mask_e is None or self.layer.mask_d is None:
            self.layer.mask_e, self.layer.mask_d = pbhl_masks(
                self.d_x, self.d_p, self.d_z, self.d_s)
        self.layer.apply_masks()


def pbhl_masks(d_x, d_p, d_z, d_s):
    mask_e = np.ones((d_z + d_s, d_x + d_p))
    mask_e[:d_z, d_x:] = 0.0            # p -> z block
    mask_d = np.ones((d_x + d_p, d_z + d_s))
    mask_d[d_x:, :d_z] = 0.0            # z -> p block
    return mask_e, mask_d


@dataclass
class DsaePbhl:
    """A trained stack plus, optionally, the parametric-bias final layer."""

    layers: list[SaeLayer]
    final: PbhlLayer | None = None
    layer_dims: list[int] = field(default_factory=list)


def init_layer(d_v, d_h, hyper, rng, mask_e=None, mask_d=None):
    """Symmetric uniform init in +/- sqrt(6 / (D_V + D_H))."""
    bound = np.sqrt(6.0 / (d_v + d_h))
    layer = SaeLayer(
        w_e=rng.uniform(-bound, bound, size=(d_h, d_v)),
        b_e=np.zeros(d_h),
        w_d=rng.uniform(-bound, bound, size=(d_v, d_h)),
        b_d=np.zeros(d_v),
        hyper=hyper,
        mask_e=mask_e,
        mask_d=mask_d,
    )
    layer.apply_masks()
    return layer


def _as_batch(v, d_v):
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    batch = v[None, :] if single else v
    if batch.ndim != 2 or batch.shape[1] != d_v:
        raise DsaeError(f"expected input dimension {d_v}, got shape {v.shape}")
    return batch, single


def forward(layer, v):
    """Hidden activations and reconstructions for a vector or batch."""
    batch, single = _as_batch(v, layer.d_v)
    h = np.tanh(batch @ layer.w_e.T + layer.b_e)
    r = np.tanh(h @ layer.w_d.T + layer.b_d)
    if single:
        return h[0], r[0]
    return h, r


def _kl_bernoulli(eta, hbar):
    return eta * np.log(eta / hbar) + (1 - eta) * np.log((1 - eta) / (1 - hbar))


def _mean_activation(h):
    """Batch-mean activations rescaled to (0, 1), clamped away from {0, 1}."""
    raw = 0.5 * (1.0 + h.mean(axis=0))
    return np.clip(raw, _HBAR_EPS, 1.0 - _HBAR_EPS), raw


def layer_loss(layer, batch):
    """Reconstruction + weight decay + KL sparsity loss over a batch."""
    batch, _ = _as_batch(batch, layer.d_v)
    if batch.shape[0] < 1:
        raise DsaeError("loss needs a nonempty batch")
    h, r = forward(layer, batch)
    hyper = layer.hyper
    recon = 0.5 * np.mean(np.sum((r - batch) ** 2, axis=1))
    decay = 0.5 * hyper.alpha * (np.sum(layer.w_e ** 2) + np.sum(layer.w_d ** 2))
    hbar, _ = _mean_activation(h)
    sparse = hyper.beta * np.sum(_kl_bernoulli(hyper.eta, hbar))
    return recon + decay + sparse


def layer_gradients(layer, batch):
    """Analytic gradients of layer_loss w.r.t. (w_e, b_e, w_d, b_d).

    The sparsity term is differentiated through the batch mean, so every
    sample contributes to every hidden unit's penalty gradient.  Masked
    entries receive exactly zero gradient.
    """
    batch, _ = _as_batch(batch, layer.d_v)
    n = batch.shape[0]
    hyper = layer.hyper
    h = np.tanh(batch @ layer.w_e.T + layer.b_e)
    r = np.tanh(h @ layer.w_d.T + layer.b_d)

    delta = (r - batch) * (1.0 - r ** 2) / n
    g_w_d = delta.T @ h + hyper.alpha * layer.w_d
    g_b_d = delta.sum(axis=0)

    hbar, raw = _mean_activation(h)
    unclamped = (raw > _HBAR_EPS) & (raw < 1.0 - _HBAR_EPS)
    kl_grad = (-hyper.eta / hbar + (1 - hyper.eta) / (1 - hbar)) * unclamped
    sparse_grad = hyper.beta * kl_grad / (2.0 * n)

    g_h = delta @ layer.w_d + sparse_grad[None, :]
    g_a = g_h * (1.0 - h ** 2)
    g_w_e = g_a.T @ batch + hyper.alpha * layer.w_e
    g_b_e = g_a.sum(axis=0)

    if layer.mask_e is not None:
        g_w_e *= layer.mask_e
    if layer.mask_d is not None:
        g_w_d *= layer.mask_d
    return g_w_e, g_b_e, g_w_d, g_b_d


def train_layer(layer, batch, schedule):
    """Full-batch gradient descent; returns the trained layer and loss trace.

    The trace holds the loss before training and after every epoch
    (epochs + 1 entries).  Aborts if the loss goes non-finite.
    """
    batch, _ = _as_batch(batch, layer.d_v)
    layer = layer.copy()
    lr = schedule.learning_rate
    trace = [layer_loss(layer, batch)]
    for epoch in range(schedule.epochs):
        g_w_e, g_b_e, g_w_d, g_b_d = layer_gradients(layer, batch)
        layer.w_e -= lr * g_w_e
        layer.b_e -= lr * g_b_e
        layer.w_d -= lr * g_w_d
        layer.b_d -= lr * g_b_d
        layer.apply_masks()
        loss = layer_loss(layer, batch)
        if not np.isfinite(loss):
            raise DsaeError(
                f"non-finite loss {loss} at epoch {epoch}; lower the learning rate")
        trace.append(loss)
    return layer, np.array(trace)


def train_stack(rows, layer_dims, hyper, schedule):
    """Greedy layer-wise training; layer l trains on layer l-1's codes."""
    if len(layer_dims) < 2:
        raise DsaeError("need at least two dims to build a stack")
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[1] != layer_dims[0]:
        raise DsaeError(
            f"data dimension {rows.shape[1]} does not match layer_dims[0]={layer_dims[0]}")
    rng = np.random.default_rng(schedule.seed)
    layers = []
    current = rows
    for d_v, d_h in zip(layer_dims[:-1], layer_dims[1:]):
        layer = init_layer(d_v, d_h, hyper, rng)
        layer, _ = train_layer(layer, current, schedule)
        layers.append(layer)
        current, _ = forward(layer, current)
    return DsaePbhl(layers=layers, final=None, layer_dims=list(layer_dims))


def encode_stack(model, rows):
    """Run rows through every stack layer, returning the last hidden codes."""
    current = np.asarray(rows, dtype=np.float64)
    for layer in model.layers:
        current, _ = forward(layer, current)
    return current


def train_pbhl(model, rows, codes, d_z, d_s, hyper, schedule):
    """Train the parametric-bias final layer on stack codes + speaker codes."""
    rows = np.asarray(rows, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape[0] != rows.shape[0]:
        raise DsaeError("rows and speaker codes must align")
    x = encode_stack(model, rows)
    d_x, d_p = x.shape[1], codes.shape[1]
    rng = np.random.default_rng(schedule.seed)
    mask_e, mask_d = pbhl_masks(d_x, d_p, d_z, d_s)
    layer = init_layer(d_x + d_p, d_z + d_s, hyper, rng, mask_e, mask_d)
    layer, _ = train_layer(layer, np.hstack([x, codes]), schedule)
    final = PbhlLayer(layer=layer, d_x=d_x, d_p=d_p, d_z=d_z, d_s=d_s)
    return DsaePbhl(layers=model.layers, final=final,
                    layer_dims=list(model.layer_dims))


def encode_pbhl_hidden(model, rows, code):
    if model.final is None:
        raise DsaeError("model has no parametric-bias layer")
    rows = np.asarray(rows, dtype=np.float64)
    code = np.asarray(code, dtype=np.float64)
    x = encode_stack(model, rows)
    p = np.tile(code, (x.shape[0], 1))
    h, _ = forward(model.final.layer, np.hstack([x, p]))
    return h


def encode_z(model, rows, code):
    """Speaker-independent codes z for normalized feature rows."""
    return encode_pbhl_hidden(model, rows, code)[:, :model.final.d_z]


def encode_s(model, rows, code):
    """Speaker-identifiable codes s for normalized feature rows."""
    return encode_pbhl_hidden(model, rows, code)[:, model.final.d_z:]


# --- persistence -------------------------------------------------------------

def _layer_payload(layer):
    return {"w_e": layer.w_e, "b_e": layer.b_e, "w_d": layer.w_d, "b_d": layer.b_d}


def _layer_from_payload(payload, hyper, mask_e=None, mask_d=None):
    return SaeLayer(
        w_e=np.array(payload["w_e"], dtype=np.float64),
        b_e=np.array(payload["b_e"], dtype=np.float64),
        w_d=np.array(payload["w_d"], dtype=np.float64),
        b_d=np.array(payload["b_d"], dtype=np.float64),
        hyper=hyper, mask_e=mask_e, mask_d=mask_d,
    )


def save_model(model, path):
    hyper = (model.layers[0].hyper if model.layers
             else model.final.layer.hyper)
    payload = {
        "layer_dims": list(model.layer_dims),
        "hyper": {"alpha": hyper.alpha, "beta": hyper.beta, "eta": hyper.eta},
        "layers": [_layer_payload(l) for l in model.layers],
        "final": None,
    }
    if model.final is not None:
        f = model.final
        payload["final"] = {
            "d_x": f.d_x, "d_p": f.d_p, "d_z": f.d_z, "d_s": f.d_s,
            "layer": _layer_payload(f.layer),
        }
    save_doc(path, "dsae-model", payload)


def load_model(path):
    payload = load_doc(path, "dsae-model")
    hyper = SaeHyper(**payload["hyper"])
    layers = [_layer_from_payload(p, hyper) for p in payload["layers"]]
    final = None
    if payload["final"] is not None:
        f = payload["final"]
        mask_e, mask_d = pbhl_masks(f["d_x"], f["d_p"], f["d_z"], f["d_s"])
        final = PbhlLayer(
            layer=_layer_from_payload(f["layer"], hyper, mask_e, mask_d),
            d_x=f["d_x"], d_p=f["d_p"], d_z=f["d_z"], d_s=f["d_s"],
        )
    return DsaePbhl(layers=layers, final=final,
                    layer_dims=list(payload["layer_dims"]))
