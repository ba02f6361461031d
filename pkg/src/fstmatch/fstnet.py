"""Disentangling real/fake detector with fake-source / fake-target pair verification.

Two feature encoders map an image to ``f_s`` and ``f_t``.  A sigmoid channel
attention splits each into a relevant part ``a * f`` (classified as the
source / target identity) and an irrelevant part ``(1 - a) * f``; the two
irrelevant parts are concatenated and fed to the real/fake head ``h``.

    loss = CE_det + lambda_s CE_src + lambda_t CE_tgt + lambda_inter L_inter
    L_inter = -mean[min(I, cap)],  I = h1(fs, ft) - h1(0, ft) - h1(fs, 0) + h1(0, 0)

where ``h1`` is the fake-class logit of ``h``.  The second difference ``I`` is
unbounded above, so the training objective saturates each sample's term at
``cap`` (``cap=None`` keeps the raw, unbounded form).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import (DenseStack, TrainConfig, TrainingError, load_networks, make_optimizer, minibatches,
                   save_networks, sigmoid, softmax_ce)

FAKE = 1
SPLIT_TOLERANCE = 1e-12
NETWORK_NAMES = ("source_encoder", "target_encoder", "attn_s", "attn_t",
                 "head_source_id", "head_target_id", "head_detect")


@dataclass
class LossWeights:
    lambda_s: float = 5.0
    lambda_t: float = 5.0
    lambda_inter: float = 0.1
    interaction_cap: float | None = 1.0

    def __post_init__(self):
        vals = (self.lambda_s, self.lambda_t, self.lambda_inter)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("loss weights must be finite and non-negative")
        if self.interaction_cap is not None and not self.interaction_cap > 0:
            raise ValueError("interaction cap must be positive")


@dataclass(eq=False)
class FstModel:
    source_encoder: DenseStack
    target_encoder: DenseStack
    attn_s: DenseStack
    attn_t: DenseStack
    head_source_id: DenseStack
    head_target_id: DenseStack
    head_detect: DenseStack

    def __post_init__(self):
        cs, ct = self.source_encoder.output_dim, self.target_encoder.output_dim
        if self.attn_s.input_dim != cs or self.attn_s.output_dim != cs:
            raise ValueError("source attention must map C_s -> C_s")
        if self.attn_t.input_dim != ct or self.attn_t.output_dim != ct:
            raise ValueError("target attention must map C_t -> C_t")
        if self.head_detect.input_dim != cs + ct or self.head_detect.output_dim != 2:
            raise ValueError("detection head must map C_s + C_t -> 2")
        if self.head_source_id.input_dim != cs or self.head_target_id.input_dim != ct:
            raise ValueError("identity heads must read the relevant features")

    @classmethod
    def init(cls, input_dim: int, n_identities: int, c_s: int = 32, c_t: int = 32, hidden: int = 64,
             head_hidden: int = 64, seed: int = 0) -> "FstModel":
        mk = DenseStack.init
        return cls(
            mk([input_dim, hidden, c_s], ["relu", "identity"], seed, 101),
            mk([input_dim, hidden, c_t], ["relu", "identity"], seed, 102),
            mk([c_s, c_s, c_s], ["relu", "identity"], seed, 103),
            mk([c_t, c_t, c_t], ["relu", "identity"], seed, 104),
            mk([c_s, n_identities], ["identity"], seed, 105),
            mk([c_t, n_identities], ["identity"], seed, 106),
            mk([c_s + c_t, head_hidden, 2], ["relu", "identity"], seed, 107),
        )

    @property
    def c_s(self) -> int:
        return self.source_encoder.output_dim

    @property
    def c_t(self) -> int:
        return self.target_encoder.output_dim

    def networks(self) -> dict[str, DenseStack]:
        return {name: getattr(self, name) for name in NETWORK_NAMES}

    @property
    def params(self) -> list[np.ndarray]:
        return [p for net in self.networks().values() for p in net.params]

    def copy(self) -> "FstModel":
        return FstModel(**{k: v.copy() for k, v in self.networks().items()})


@dataclass
class DisentangledFeatures:
    a_s: np.ndarray
    a_t: np.ndarray
    f_s_r: np.ndarray
    f_t_r: np.ndarray
    f_s_ir: np.ndarray
    f_t_ir: np.ndarray


def split_features(f, a) -> tuple[np.ndarray, np.ndarray]:
    f, a = np.asarray(f, dtype=np.float64), np.asarray(a, dtype=np.float64)
    if f.shape != a.shape:
        raise ValueError("feature and attention shapes differ")
    return a * f, (1.0 - a) * f


def disentangle(f, attn: DenseStack) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    f2 = f[None, :] if single else f
    if f2.shape[1] != attn.input_dim or attn.output_dim != attn.input_dim:
        raise ValueError("attention network does not match the feature width")
    a = sigmoid(attn(f2))
    f_r, f_ir = split_features(f2, a)
    if single:
        return a[0], f_r[0], f_ir[0]
    return a, f_r, f_ir


def _flatten_images(model: FstModel, images) -> np.ndarray:
    x = np.asarray(getattr(images, "grids", images), dtype=np.float64)
    if x.size == model.source_encoder.input_dim:
        return x.reshape(1, -1)
    return x.reshape(x.shape[0], -1)


def _forward(model: FstModel, x: np.ndarray):
    f_s, c_es = model.source_encoder.forward_cache(x)
    f_t, c_et = model.target_encoder.forward_cache(x)
    z_s, c_as = model.attn_s.forward_cache(f_s)
    z_t, c_at = model.attn_t.forward_cache(f_t)
    a_s, a_t = sigmoid(z_s), sigmoid(z_t)
    fs_r, fs_ir = split_features(f_s, a_s)
    ft_r, ft_ir = split_features(f_t, a_t)
    ys, c_hs = model.head_source_id.forward_cache(fs_r)
    yt, c_ht = model.head_target_id.forward_cache(ft_r)
    yd, c_hd = model.head_detect.forward_cache(np.concatenate([fs_ir, ft_ir], axis=1))
    feats = DisentangledFeatures(a_s, a_t, fs_r, ft_r, fs_ir, ft_ir)
    cache = dict(f_s=f_s, f_t=f_t, c_es=c_es, c_et=c_et, c_as=c_as, c_at=c_at,
                 c_hs=c_hs, c_ht=c_ht, c_hd=c_hd)
    return (ys, yt, yd), feats, cache


def forward_fst(model: FstModel, image):
    """``(source logits, target logits, detection logits, features)``."""
    (ys, yt, yd), feats, _ = _forward(model, _flatten_images(model, image))
    return ys, yt, yd, feats


def detection_scorer(model: FstModel, label: int = FAKE):
    """Batched scorer on the detection logit of ``label``."""

    def score(images: np.ndarray) -> np.ndarray:
        (_, _, yd), _, _ = _forward(model, images.reshape(images.shape[0], -1))
        return yd[:, label]

    score.concurrent_safe = True
    return score


def classification_loss(preds, labels, weights: LossWeights) -> float:
    ys, yt, yd = preds
    y_s, y_t, y_d = labels
    loss = softmax_ce(np.atleast_2d(yd), np.atleast_1d(y_d))[0]
    if weights.lambda_s:
        loss += weights.lambda_s * softmax_ce(np.atleast_2d(ys), np.atleast_1d(y_s))[0]
    if weights.lambda_t:
        loss += weights.lambda_t * softmax_ce(np.atleast_2d(yt), np.atleast_1d(y_t))[0]
    return float(loss)


def _head_scalar(h, u: np.ndarray) -> np.ndarray:
    out = np.asarray(h(u), dtype=np.float64)
    return out[:, FAKE] if out.ndim == 2 else out


def interaction_terms(h, f_s_ir, f_t_ir) -> np.ndarray:
    """Per-sample second difference of the fake-class logit of ``h``."""
    fs = np.atleast_2d(np.asarray(f_s_ir, dtype=np.float64))
    ft = np.atleast_2d(np.asarray(f_t_ir, dtype=np.float64))
    zs, zt = np.zeros_like(fs), np.zeros_like(ft)
    cat = np.concatenate
    return (_head_scalar(h, cat([fs, ft], axis=1)) - _head_scalar(h, cat([zs, ft], axis=1))
            - _head_scalar(h, cat([fs, zt], axis=1)) + _head_scalar(h, cat([zs, zt], axis=1)))


def interaction_loss(h, f_s_ir, f_t_ir, select=None, cap: float | None = None) -> float:
    """Negated mean interaction; ``select`` restricts the mean to a boolean subset."""
    terms = interaction_terms(h, f_s_ir, f_t_ir)
    if cap is not None:
        terms = np.minimum(terms, cap)
    if select is not None:
        select = np.asarray(select, dtype=bool)
        if not select.any():
            return 0.0
        terms = terms[select]
    return float(-terms.mean())


def _labels(labels):
    return tuple(np.atleast_1d(np.asarray(l, dtype=np.int64)) for l in labels)


def loss_components(model: FstModel, batch, labels, weights: LossWeights, fakes_only: bool = False) -> dict:
    x = _flatten_images(model, batch)
    y_s, y_t, y_d = _labels(labels)
    (ys, yt, yd), feats, _ = _forward(model, x)
    select = (y_d == FAKE) if fakes_only else None
    det = softmax_ce(yd, y_d)[0]
    src = softmax_ce(ys, y_s)[0]
    tgt = softmax_ce(yt, y_t)[0]
    inter = interaction_loss(model.head_detect, feats.f_s_ir, feats.f_t_ir, select, weights.interaction_cap)
    cls = det + weights.lambda_s * src + weights.lambda_t * tgt
    return {"loss": cls + weights.lambda_inter * inter, "cls": cls, "det": det, "src": src,
            "tgt": tgt, "inter": inter}


def total_loss(model: FstModel, batch, labels, weights: LossWeights, fakes_only: bool = False) -> float:
    return float(loss_components(model, batch, labels, weights, fakes_only)["loss"])


def total_loss_and_grad(model: FstModel, batch, labels, weights: LossWeights, fakes_only: bool = False):
    """Loss components and gradients ordered like ``model.params``."""
    x = _flatten_images(model, batch)
    y_s, y_t, y_d = _labels(labels)
    (ys, yt, yd), feats, c = _forward(model, x)
    n, cs = x.shape[0], model.c_s
    h = model.head_detect

    det, d_yd = softmax_ce(yd, y_d)
    src, d_ys = softmax_ce(ys, y_s)
    tgt, d_yt = softmax_ce(yt, y_t)
    d_ys *= weights.lambda_s
    d_yt *= weights.lambda_t

    fs_ir, ft_ir = feats.f_s_ir, feats.f_t_ir
    sel = (y_d == FAKE) if fakes_only else np.ones(n, dtype=bool)
    n_sel = int(sel.sum())
    w = sel / n_sel if n_sel else np.zeros(n)
    zs, zt = np.zeros_like(fs_ir), np.zeros_like(ft_ir)
    out_0t, c_0t = h.forward_cache(np.concatenate([zs, ft_ir], axis=1))
    out_s0, c_s0 = h.forward_cache(np.concatenate([fs_ir, zt], axis=1))
    out_00, c_00 = h.forward_cache(np.concatenate([zs, zt], axis=1))
    terms = yd[:, FAKE] - out_0t[:, FAKE] - out_s0[:, FAKE] + out_00[:, FAKE]
    if weights.interaction_cap is not None:
        saturated = terms >= weights.interaction_cap
        terms = np.minimum(terms, weights.interaction_cap)
        w = np.where(saturated, 0.0, w)
        inter = float(-(sel / max(n_sel, 1) * terms).sum()) if n_sel else 0.0
    else:
        inter = float(-(w * terms).sum()) if n_sel else 0.0
    li = weights.lambda_inter

    def unit(sign):
        d = np.zeros((n, 2))
        d[:, FAKE] = sign * li * w
        return d

    g_h, du_full = h.backward(c["c_hd"], d_yd + unit(-1.0))
    g_h0t, du_0t = h.backward(c_0t, unit(+1.0))
    g_hs0, du_s0 = h.backward(c_s0, unit(+1.0))
    g_h00, _ = h.backward(c_00, unit(-1.0))
    g_h = [a + b + c_ + d for a, b, c_, d in zip(g_h, g_h0t, g_hs0, g_h00)]
    d_fs_ir = du_full[:, :cs] + du_s0[:, :cs]
    d_ft_ir = du_full[:, cs:] + du_0t[:, cs:]

    g_hs, d_fs_r = model.head_source_id.backward(c["c_hs"], d_ys)
    g_ht, d_ft_r = model.head_target_id.backward(c["c_ht"], d_yt)

    def through_attention(attn, cache, f, a, d_r, d_ir):
        dz = (d_r - d_ir) * f * a * (1.0 - a)
        g_attn, d_f_attn = attn.backward(cache, dz)
        return g_attn, d_r * a + d_ir * (1.0 - a) + d_f_attn

    g_as, d_fs = through_attention(model.attn_s, c["c_as"], c["f_s"], feats.a_s, d_fs_r, d_fs_ir)
    g_at, d_ft = through_attention(model.attn_t, c["c_at"], c["f_t"], feats.a_t, d_ft_r, d_ft_ir)
    g_es, _ = model.source_encoder.backward(c["c_es"], d_fs)
    g_et, _ = model.target_encoder.backward(c["c_et"], d_ft)

    grads = g_es + g_et + g_as + g_at + g_hs + g_ht + g_h
    cls = det + weights.lambda_s * src + weights.lambda_t * tgt
    residual = max(float(np.abs(feats.f_s_r + fs_ir - c["f_s"]).max()),
                   float(np.abs(feats.f_t_r + ft_ir - c["f_t"]).max()))
    comps = {"loss": cls + li * inter, "cls": cls, "det": det, "src": src, "tgt": tgt, "inter": inter,
             "split_residual": residual}
    return comps, grads, feats


def fst_labels(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source id, target id and real/fake label per sample; reals use their own id twice."""
    y_s = np.array([s.source_id for s in samples], dtype=np.int64)
    y_t = np.array([s.target_id for s in samples], dtype=np.int64)
    y_d = np.array([s.label for s in samples], dtype=np.int64)
    return y_s, y_t, y_d


def _accuracies(model: FstModel, x, labels) -> dict:
    (ys, yt, yd), _, _ = _forward(model, x)
    y_s, y_t, y_d = labels
    return {"acc_det": float(np.mean(yd.argmax(1) == y_d)),
            "acc_src": float(np.mean(ys.argmax(1) == y_s)),
            "acc_tgt": float(np.mean(yt.argmax(1) == y_t))}


def train_fst(model: FstModel, X, labels, config: TrainConfig, weights: LossWeights,
              fakes_only: bool = False) -> tuple[FstModel, list[dict]]:
    """Minibatch training of every sub-network on the total loss."""
    config.validate()
    X = np.asarray(X, dtype=np.float64)
    labels = _labels(labels)
    n = labels[2].shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    X = X.reshape(n, -1)
    model = model.copy()
    opt = make_optimizer(model.params, config)
    history = []
    for epoch in range(config.epochs):
        sums = dict.fromkeys(("loss", "cls", "det", "src", "tgt", "inter"), 0.0)
        worst_split = 0.0
        for idx in minibatches(n, config, epoch):
            comps, grads, feats = total_loss_and_grad(model, X[idx], tuple(l[idx] for l in labels),
                                                      weights, fakes_only)
            if not np.isfinite(comps["loss"]):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            if comps["split_residual"] > SPLIT_TOLERANCE:
                raise TrainingError(f"f_r + f_ir != f (residual {comps['split_residual']:.3g})")
            worst_split = max(worst_split, comps["split_residual"])
            opt.step(grads)
            for k in sums:
                sums[k] += comps[k] * len(idx)
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()},
               "split_residual": worst_split, **_accuracies(model, X, labels)}
        history.append(row)
    return model, history


def save_fst(model: FstModel, path, fmt: str = "npz"):
    return save_networks(model.networks(), path, fmt, kind="fst")


def load_fst(path) -> FstModel:
    nets, manifest = load_networks(path)
    if manifest.get("kind") != "fst" or set(nets) != set(NETWORK_NAMES):
        raise ValueError(f"{path} is not an FST checkpoint")
    return FstModel(**nets)
