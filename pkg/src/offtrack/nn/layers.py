"""Layers and the fixed encoder/decoder architectures of the refiners.

Three PointNet-style encoders are used, identified by architecture name:

- ``geometry_query`` (input width 11) and ``position_query`` (input width
  32): Linear(F->128)+ReLU+BN, Linear(128->128)+ReLU+BN, Linear(128->256),
  max-pool over points, Linear(256->256)+ReLU+BN -> one 256-vector per
  sample/frame.
- ``geometry_value`` (input width 10) and ``position_value`` (input width
  32): the same trunk to per-point 128 features, a Linear(128->512) branch,
  the pooled 128 vector repeated and concatenated to 640, then
  Linear(640->256)+ReLU+BN -> per-point 256 features.
- ``confidence_query``: identical to ``geometry_query``.

BatchNorm normalizes over all leading axes; an optional row mask excludes
padded rows from the batch statistics so padded content can never leak into
valid outputs. With a single effective row, training-mode BN falls back to
the running statistics (variance of one row is undefined).
"""

from __future__ import annotations

import math

import numpy as np

from offtrack.nn.autograd import Tensor, batch_norm, concat, masked_softmax, parameter

D_MODEL = 256
HEAD_COUNT = 4

ENCODER_INPUT_WIDTHS = {
    "geometry_query": 11,
    "geometry_value": 10,
    "position_query": 32,
    "position_value": 32,
    "confidence_query": 11,
}


class Module:
    """Minimal parameter container with named state for checkpoints."""

    def named_parameters(self) -> dict:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.named_parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.named_parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
        return out

    def named_buffers(self) -> dict:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Module):
                for sub, b in value.named_buffers().items():
                    out[f"{name}.{sub}"] = b
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, b in item.named_buffers().items():
                            out[f"{name}.{i}.{sub}"] = b
        return out

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def set_training(self, training: bool):
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.training = training

    def state_arrays(self) -> dict:
        state = {f"param.{k}": v.data for k, v in self.named_parameters().items()}
        state.update({f"buffer.{k}": v for k, v in self.named_buffers().items()})
        return state

    def load_state_arrays(self, state: dict):
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = {f"param.{k}" for k in params} | {f"buffer.{k}" for k in buffers}
        if expected != set(state):
            missing = expected - set(state)
            extra = set(state) - expected
            raise ValueError(f"state mismatch: missing={sorted(missing)[:4]} "
                             f"extra={sorted(extra)[:4]}")
        for k, p in params.items():
            arr = state[f"param.{k}"]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(np.float64).copy()
        for k, b in buffers.items():
            b[...] = state[f"buffer.{k}"]

    def cast(self, dtype):
        """Cast parameters and buffers in place (float32 inference)."""
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True,
                 init_scale: float = 1.0):
        self.weight = parameter((in_features, out_features), rng,
                                scale=init_scale * math.sqrt(2.0 / in_features))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class BatchNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = parameter(np.ones(features))
        self.beta = parameter(np.zeros(features))
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.eps = eps
        self.momentum = momentum
        self.training = True

    def __call__(self, x: Tensor, row_mask: "np.ndarray | None" = None) -> Tensor:
        use_batch = self.training
        if use_batch:
            count = int(np.sum(row_mask)) if row_mask is not None \
                else int(np.prod(x.shape[:-1]))
            if count <= 1:
                use_batch = False
        if not use_batch:
            return self._eval_forward(x)
        weights = None
        if row_mask is not None:
            weights = np.broadcast_to(row_mask[..., None], x.shape[:-1] + (1,))
            weights = weights.reshape(-1).astype(x.data.dtype)
        out, mean, var = batch_norm(x, self.gamma, self.beta, weights, self.eps)
        mom = self.momentum
        self.running_mean = (1 - mom) * self.running_mean + mom * mean
        self.running_var = (1 - mom) * self.running_var + mom * var
        return out

    def _eval_forward(self, x: Tensor) -> Tensor:
        """Normalize with the (constant) running statistics."""
        dtype = x.data.dtype
        sigma = np.sqrt(self.running_var + self.eps).astype(dtype)
        x_hat = (x.data - self.running_mean.astype(dtype)) / sigma
        gamma, beta = self.gamma, self.beta
        out_data = x_hat * gamma.data + beta.data
        lead = tuple(range(x_hat.ndim - 1))

        def backward(g):
            return (g * gamma.data / sigma,
                    (g * x_hat).sum(axis=lead),
                    g.sum(axis=lead))

        return Tensor._result(out_data, (x, gamma, beta), backward)

    def named_buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class PointNetEncoder(Module):
    """Pooled per-sample encoder (query tables): (..., P, F) -> (..., D)."""

    def __init__(self, arch: str, rng: np.random.Generator,
                 hidden: int = 128, d_model: int = D_MODEL):
        if arch not in ("geometry_query", "position_query", "confidence_query"):
            raise ValueError(f"not a query encoder arch: {arch}")
        self.arch = arch
        in_features = ENCODER_INPUT_WIDTHS[arch]
        self.lin1 = Linear(in_features, hidden, rng)
        self.bn1 = BatchNorm(hidden)
        self.lin2 = Linear(hidden, hidden, rng)
        self.bn2 = BatchNorm(hidden)
        self.lin3 = Linear(hidden, d_model, rng)
        self.lin4 = Linear(d_model, d_model, rng)
        self.bn4 = BatchNorm(d_model)

    def __call__(self, x: Tensor, row_mask: "np.ndarray | None" = None) -> Tensor:
        expected = ENCODER_INPUT_WIDTHS[self.arch]
        if x.shape[-1] != expected:
            raise ValueError(f"{self.arch} expects {expected} input features, "
                             f"got {x.shape[-1]}")
        point_mask = None if row_mask is None else row_mask[..., None]
        h = self.bn1(self.lin1(x).relu(), point_mask)
        h = self.bn2(self.lin2(h).relu(), point_mask)
        h = self.lin3(h)
        pooled = h.max(axis=-2)
        return self.bn4(self.lin4(pooled).relu(), row_mask)


class PointNetValueEncoder(Module):
    """Per-point encoder (value table): (N, F) -> (N, D)."""

    def __init__(self, arch: str, rng: np.random.Generator,
                 hidden: int = 128, d_model: int = D_MODEL):
        if arch not in ("geometry_value", "position_value"):
            raise ValueError(f"not a value encoder arch: {arch}")
        self.arch = arch
        in_features = ENCODER_INPUT_WIDTHS[arch]
        self.lin1 = Linear(in_features, hidden, rng)
        self.bn1 = BatchNorm(hidden)
        self.lin2 = Linear(hidden, hidden, rng)
        self.bn2 = BatchNorm(hidden)
        self.lin3 = Linear(hidden, 4 * hidden, rng)
        self.lin4 = Linear(5 * hidden, d_model, rng)
        self.bn4 = BatchNorm(d_model)

    def __call__(self, x: Tensor) -> Tensor:
        expected = ENCODER_INPUT_WIDTHS[self.arch]
        if x.shape[-1] != expected:
            raise ValueError(f"{self.arch} expects {expected} input features, "
                             f"got {x.shape[-1]}")
        h = self.bn1(self.lin1(x).relu())
        h = self.bn2(self.lin2(h).relu())
        wide = self.lin3(h)
        pooled = h.max(axis=-2)
        lead = x.shape[:-2]
        n = x.shape[-2]
        rep = pooled.reshape((*lead, 1, pooled.shape[-1])).broadcast_to(
            (*lead, n, pooled.shape[-1]))
        cat = concat([wide, rep], axis=-1)
        return self.bn4(self.lin4(cat).relu())


def _multi_head(x: Tensor, heads: int) -> Tensor:
    """(..., n, d) -> (..., heads, n, d/heads)."""
    *lead, n, d = x.shape
    k = len(lead)
    split = x.reshape((*lead, n, heads, d // heads))
    return split.transpose((*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, n, dk) -> (..., n, heads * dk)."""
    *lead, h, n, dk = x.shape
    k = len(lead)
    return x.transpose((*range(k), k + 1, k, k + 2)).reshape((*lead, n, h * dk))


class AttentionBlock(Module):
    """One decoder layer: masked multi-head self-attention over the queries,
    cross-attention onto the point features, then a feed-forward network,
    each with a residual connection.

    Dot products are scaled by sqrt(D/heads) by default; the unscaled
    variant (as the update equations print it) saturates softmax at D=256
    and is kept behind ``scaled=False`` for comparison.
    """

    def __init__(self, rng: np.random.Generator, d_model: int = D_MODEL,
                 heads: int = HEAD_COUNT, scaled: bool = True):
        if d_model % heads:
            raise ValueError("head count must divide d_model")
        self.d_model = d_model
        self.heads = heads
        self.scaled = scaled
        self.w1 = Linear(d_model, d_model, rng, bias=False)
        self.w2 = Linear(d_model, d_model, rng, bias=False)
        self.w3 = Linear(d_model, d_model, rng, bias=False)
        self.w4 = Linear(d_model, d_model, rng, bias=False)
        self.w5 = Linear(d_model, d_model, rng, bias=False)
        self.w6 = Linear(d_model, d_model, rng, bias=False)
        self.ffn1 = Linear(d_model, d_model, rng)
        self.ffn2 = Linear(d_model, d_model, rng)
        self.empty_rows = 0  # queries whose mask excluded every key

    def _attend(self, q_proj, k_proj, v_proj, mask):
        scale = 1.0 / math.sqrt(self.d_model / self.heads) if self.scaled else 1.0
        k_heads = _multi_head(k_proj, self.heads)
        swap = (*range(k_heads.ndim - 2), k_heads.ndim - 1, k_heads.ndim - 2)
        scores = (_multi_head(q_proj, self.heads) @ k_heads.transpose(swap)) * scale
        if mask is not None:
            self.empty_rows += int((~mask.any(axis=-1)).sum())
        attn = masked_softmax(scores, mask)
        return _merge_heads(attn @ _multi_head(v_proj, self.heads))

    def self_attention(self, q: Tensor, mask: "np.ndarray | None" = None) -> Tensor:
        return q + self._attend(self.w1(q), self.w2(q), self.w3(q), mask)

    def cross_attention(self, q: Tensor, k: Tensor, v: Tensor,
                        mask: "np.ndarray | None" = None) -> Tensor:
        out = q + self._attend(self.w4(q), self.w5(k), self.w6(v), mask)
        return out + self.ffn2(self.ffn1(out).relu())

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 sa_mask: "np.ndarray | None" = None,
                 ca_mask: "np.ndarray | None" = None) -> Tensor:
        return self.cross_attention(self.self_attention(q, sa_mask), k, v, ca_mask)
