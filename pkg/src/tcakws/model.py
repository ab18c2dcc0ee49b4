"""TCANet: 7-layer temporal-conv encoder, multi-head self-attention decoder,
softmax classifier, plus the two MLP projection heads used during
self-supervised training.

Input is a per-utterance-normalized log-mel batch [B,100,40]; the first conv
strides 2 in time, so encoder/decoder features are [B,50,64].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .tensor import BNStats, Tensor


@dataclass
class ModelConfig:
    n_mels: int = 40
    frames: int = 100
    channels: int = 64
    n_layers: int = 7            # 1 plain conv + (n_layers-1) separable
    first_kernel: int = 3
    kernel: int = 9
    n_classes: int = 12
    num_heads: int = 4
    sqrt_scaling: bool = False   # False: divide attention logits by 64/num_heads, as specified
    wvc_hidden: int = 128
    wvc_dim: int = 768
    siam_hidden: int = 128
    siam_dim: int = 128


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)  # uniform bound for ReLU gain sqrt(2)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _xavier_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class TCANet:
    """Model parameters plus the forward operations over them.

    Parameters live in `self.params` (name -> Tensor, requires_grad=True);
    BN running statistics in `self.bn_stats` (layer name -> BNStats).
    The two siamese branches run through the same object, so weight sharing
    holds by construction.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        if c.channels % c.num_heads != 0:
            raise ContractViolation(
                f"num_heads {c.num_heads} must divide channels {c.channels}")
        rng = np.random.default_rng(seed)
        P: dict[str, Tensor] = {}

        def param(name, data):
            P[name] = Tensor(data, requires_grad=True, name=name)

        param("enc0.w", _kaiming_uniform(rng, (c.first_kernel, c.n_mels, c.channels),
                                         c.first_kernel * c.n_mels))
        param("enc0.b", np.zeros(c.channels, dtype=np.float32))
        param("enc0.bn.gamma", np.ones(c.channels, dtype=np.float32))
        param("enc0.bn.beta", np.zeros(c.channels, dtype=np.float32))
        for i in range(1, c.n_layers):
            param(f"enc{i}.dw", _kaiming_uniform(rng, (c.kernel, c.channels), c.kernel))
            param(f"enc{i}.pw", _kaiming_uniform(rng, (c.channels, c.channels), c.channels))
            param(f"enc{i}.pwb", np.zeros(c.channels, dtype=np.float32))
            param(f"enc{i}.bn.gamma", np.ones(c.channels, dtype=np.float32))
            param(f"enc{i}.bn.beta", np.zeros(c.channels, dtype=np.float32))
        for name in ("wq", "wk", "wv", "wo"):
            param(f"dec.{name}", _xavier_uniform(rng, (c.channels, c.channels),
                                                 c.channels, c.channels))
        param("cls.w", _xavier_uniform(rng, (c.channels, c.n_classes),
                                       c.channels, c.n_classes))
        param("cls.b", np.zeros(c.n_classes, dtype=np.float32))
        param("wvc.w1", _xavier_uniform(rng, (c.channels, c.wvc_hidden),
                                        c.channels, c.wvc_hidden))
        param("wvc.w2", _xavier_uniform(rng, (c.wvc_hidden, c.wvc_dim),
                                        c.wvc_hidden, c.wvc_dim))
        param("siam.w3", _xavier_uniform(rng, (c.channels, c.siam_hidden),
                                         c.channels, c.siam_hidden))
        param("siam.w4", _xavier_uniform(rng, (c.siam_hidden, c.siam_dim),
                                         c.siam_hidden, c.siam_dim))
        self.params = P
        self.bn_stats = {f"enc{i}.bn": BNStats(c.channels) for i in range(c.n_layers)}

    # -- sections ------------------------------------------------------------

    def section_of(self, name: str) -> str:
        if name.startswith("enc"):
            return "encoder"
        if name.startswith("dec"):
            return "decoder"
        if name.startswith("cls"):
            return "classifier"
        if name.startswith("wvc"):
            return "wvc_head"
        return "siam_head"

    def param_names(self, sections) -> list[str]:
        sections = set(sections)
        return [n for n in self.params if self.section_of(n) in sections]

    # -- forwards ------------------------------------------------------------

    def encoder_forward(self, x: Tensor, train: bool,
                        update_stats: bool | None = None) -> Tensor:
        c = self.cfg
        if x.ndim != 3 or x.shape[1] != c.frames or x.shape[2] != c.n_mels:
            raise ContractViolation(
                f"encoder expects [B,{c.frames},{c.n_mels}], got {x.shape}")
        if update_stats is None:
            update_stats = train
        P = self.params
        h = T.conv1d(x, P["enc0.w"], P["enc0.b"], stride=2)
        h = T.batch_norm_relu(h, P["enc0.bn.gamma"], P["enc0.bn.beta"],
                              self.bn_stats["enc0.bn"], train, update_stats=update_stats)
        for i in range(1, c.n_layers):
            h = T.separable_conv1d(h, P[f"enc{i}.dw"], P[f"enc{i}.pw"],
                                   pointwise_bias=P[f"enc{i}.pwb"])
            h = T.batch_norm_relu(h, P[f"enc{i}.bn.gamma"], P[f"enc{i}.bn.beta"],
                                  self.bn_stats[f"enc{i}.bn"], train,
                                  update_stats=update_stats)
        return h

    def decoder_forward(self, e: Tensor) -> Tensor:
        c = self.cfg
        P = self.params
        B, F, C = e.shape
        H = c.num_heads
        d = C // H
        scale = 1.0 / np.sqrt(d) if c.sqrt_scaling else 1.0 / d

        def heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (B, F, H, d)), (0, 2, 1, 3))

        q = heads(T.matmul(e, P["dec.wq"]))
        k = heads(T.matmul(e, P["dec.wk"]))
        v = heads(T.matmul(e, P["dec.wv"]))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
        att = T.softmax(scores, axis=-1)
        ctx = T.matmul(att, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, F, C))
        return T.matmul(merged, P["dec.wo"])

    def attention_weights(self, e: Tensor) -> np.ndarray:
        """Softmax attention matrices [B,H,F,F] (diagnostics only)."""
        c = self.cfg
        P = self.params
        B, F, C = e.shape
        H = c.num_heads
        d = C // H
        scale = 1.0 / np.sqrt(d) if c.sqrt_scaling else 1.0 / d
        q = np.matmul(e.data, P["dec.wq"].data).reshape(B, F, H, d).transpose(0, 2, 1, 3)
        k = np.matmul(e.data, P["dec.wk"].data).reshape(B, F, H, d).transpose(0, 2, 1, 3)
        s = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        e_ = np.exp(s)
        return e_ / e_.sum(axis=-1, keepdims=True)

    def classify(self, d: Tensor) -> Tensor:
        p = self.params
        pooled = d.mean(axis=1)
        logits = T.matmul(pooled, p["cls.w"]) + p["cls.b"]
        return T.softmax(logits, axis=-1)

    def wvc_projection(self, e: Tensor) -> Tensor:
        p = self.params
        return T.matmul(T.relu(T.matmul(e, p["wvc.w1"])), p["wvc.w2"])

    def siam_projection(self, d: Tensor) -> Tensor:
        p = self.params
        return T.matmul(T.relu(T.matmul(d, p["siam.w3"])), p["siam.w4"])

    def forward_probs(self, x: Tensor, train: bool = False) -> Tensor:
        """Full classification chain [B,100,40] -> [B,n_classes]."""
        return self.classify(self.decoder_forward(self.encoder_forward(x, train)))

    # -- bookkeeping -----------------------------------------------------------

    def parameter_counts(self) -> dict[str, int]:
        counts = {"encoder": 0, "decoder": 0, "classifier": 0,
                  "siam_head": 0, "wvc_head": 0}
        for name, p in self.params.items():
            counts[self.section_of(name)] += p.size
        counts["core"] = counts["encoder"] + counts["decoder"] + counts["classifier"]
        # reported footprint: the KWS network incl. its siamese projection;
        # the wvc head only adapts to the 768-dim external teacher interface
        counts["model"] = counts["core"] + counts["siam_head"]
        counts["total"] = counts["core"] + counts["siam_head"] + counts["wvc_head"]
        return counts

    def describe(self) -> str:
        lines = [f"{'name':<16} {'shape':<14} {'params':>8}"]
        lines.append("-" * 40)
        for name, p in self.params.items():
            lines.append(f"{name:<16} {str(tuple(p.shape)):<14} {p.size:>8}")
        c = self.parameter_counts()
        lines.append("-" * 40)
        for sec in ("encoder", "decoder", "classifier", "siam_head"):
            lines.append(f"{sec:<31} {c[sec]:>8}")
        lines.append(f"{'model parameters':<31} {c['model']:>8}")
        lines.append(f"{'wvc teacher-adapter head':<31} {c['wvc_head']:>8}")
        lines.append(f"{'total trainable':<31} {c['total']:>8}")
        return "\n".join(lines)

    # -- state -----------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        for layer, s in self.bn_stats.items():
            out[f"{layer}.running_mean"] = s.mean
            out[f"{layer}.running_var"] = s.var
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray],
                          strict: bool = True) -> None:
        for name, p in self.params.items():
            if name in state:
                if state[name].shape != p.data.shape:
                    raise ContractViolation(
                        f"checkpoint shape mismatch for {name}: "
                        f"{state[name].shape} vs {p.data.shape}")
                p.data = state[name].astype(np.float32).copy()
            elif strict:
                raise ContractViolation(f"checkpoint missing parameter {name!r}")
        for layer, s in self.bn_stats.items():
            mkey, vkey = f"{layer}.running_mean", f"{layer}.running_var"
            if mkey in state:
                s.mean = state[mkey].astype(np.float32).copy()
                s.var = state[vkey].astype(np.float32).copy()
            elif strict:
                raise ContractViolation(f"checkpoint missing BN stats for {layer!r}")


def init_params(seed: int, cfg: ModelConfig | None = None) -> TCANet:
    """Fresh deterministic model (Kaiming conv / Xavier linear, BN identity)."""
    return TCANet(cfg, seed=seed)
