"""The three attribute refiners.

- GeometryRefiner: t point-set queries (plus a linear embedding of the
  proposal sizes) attend over the pooled object cloud and classify a
  template size class with per-class residuals; the t decoded sizes are
  averaged and assigned to every frame of the track.
- PositionRefiner: per-frame queries with a 1D locality mask self-attend
  along the track and cross-attend to pooled track point features to
  predict per-frame center offsets and a bin-based heading in the track's
  reference frame.
- ConfidenceRefiner: a query-encoder trunk fused by an MLP feeding two
  sigmoid branches, TP-vs-FP probability and expected post-refinement IoU.
"""

from __future__ import annotations

import numpy as np

from offtrack.nn import (AttentionBlock, Linear, Module, PointNetEncoder,
                         PointNetValueEncoder, Tensor, no_grad)
from offtrack.objprep import GeometryPointSet, PositionPointSet
from offtrack.refine.anchors import SizeAnchorTable
from offtrack.refine.heading import CODEC
from offtrack.refine.labels import ScorePair

GRM_ARCH = "geometry_refiner"
PRM_ARCH = "position_refiner"
CRM_ARCH = "confidence_refiner"

PRM_MASK_WINDOW = 10  # frames; +-1 s at 10 Hz


class GeometryRefiner(Module):
    def __init__(self, anchors: SizeAnchorTable, rng: np.random.Generator,
                 d_model: int = 256, hidden: int = 128, heads: int = 4,
                 scaled: bool = True):
        self.anchors = np.asarray(anchors.anchors, dtype=np.float64)
        self.meta = np.array([d_model, hidden, heads, len(self.anchors),
                              float(scaled)], dtype=np.float64)
        self.enc1 = PointNetEncoder("geometry_query", rng, hidden, d_model)
        self.size_embed = Linear(3, d_model, rng)
        self.enc2 = PointNetValueEncoder("geometry_value", rng, hidden, d_model)
        self.attn = AttentionBlock(rng, d_model, heads, scaled)
        a = len(self.anchors)
        # near-zero head: initial predictions sit at the anchors
        self.head = Linear(d_model, a + 3 * a, rng, init_scale=0.01)

    def named_buffers(self) -> dict:
        out = super().named_buffers()
        out["anchors"] = self.anchors
        out["meta"] = self.meta
        return out

    @property
    def anchor_table(self) -> SizeAnchorTable:
        return SizeAnchorTable(self.anchors)

    def forward_rows(self, query_rows, query_sizes, value_rows):
        """Size-class logits (..., t, A) and residuals (..., t, A, 3); any
        leading batch dimensions are carried through."""
        dtype = self.head.weight.data.dtype
        queries = self.enc1(Tensor(np.asarray(query_rows).astype(dtype)))
        queries = queries + self.size_embed(
            Tensor(np.asarray(query_sizes).astype(dtype)))
        values = self.enc2(Tensor(np.asarray(value_rows).astype(dtype)))
        decoded = self.attn(queries, values, values)
        out = self.head(decoded)
        a = len(self.anchors)
        logits = out.narrow(-1, 0, a)
        residuals = out.narrow(-1, a, 3 * a).reshape((*out.shape[:-1], a, 3))
        return logits, residuals

    def forward(self, gset: GeometryPointSet):
        """Per-query size-class logits (t, A) and residuals (t, A, 3)."""
        return self.forward_rows(gset.query_rows, gset.query_sizes,
                                 gset.value_rows)

    def predict_size(self, gset: GeometryPointSet) -> np.ndarray:
        """Final (l, w, h): per-query anchor(argmax) + residual, averaged."""
        with no_grad():
            logits, residuals = self.forward(gset)
        best = logits.data.argmax(axis=1)
        sizes = self.anchors[best] + residuals.data[np.arange(gset.t), best]
        return np.maximum(sizes.mean(axis=0), 0.05).astype(np.float64)


class PositionRefiner(Module):
    def __init__(self, rng: np.random.Generator, d_model: int = 256,
                 hidden: int = 128, heads: int = 4,
                 mask_window: int = PRM_MASK_WINDOW, scaled: bool = True):
        self.mask_window = mask_window
        self.meta = np.array([d_model, hidden, heads, mask_window,
                              float(scaled)], dtype=np.float64)
        self.query_enc = PointNetEncoder("position_query", rng, hidden, d_model)
        self.value_enc = PointNetValueEncoder("position_value", rng, hidden, d_model)
        self.attn = AttentionBlock(rng, d_model, heads, scaled)
        # near-zero head: initial refinement leaves the proposals unchanged
        self.head = Linear(d_model, 3 + 2 * CODEC.bin_count, rng, init_scale=0.01)

    def named_buffers(self) -> dict:
        out = super().named_buffers()
        out["meta"] = self.meta
        return out

    def locality_mask(self, valid: np.ndarray) -> np.ndarray:
        """(L, L) allowed-key mask: within the +-window and a valid frame.

        Rows for invalid frames keep their own key so softmax stays defined;
        their outputs are never supervised or read.
        """
        n = len(valid)
        idx = np.arange(n)
        window = np.abs(idx[:, None] - idx[None, :]) <= self.mask_window
        allowed = window & valid[None, :]
        empty = np.flatnonzero(~allowed.any(axis=1))
        allowed[empty, empty] = True
        return allowed

    def forward_rows(self, rows, valid, value_rows):
        """Batched forward: rows (B, L, P, 32), valid (B, L), value_rows
        (B, n, 32) -> offsets (B, L, 3), bin logits and residuals (B, L, 12).
        """
        dtype = self.head.weight.data.dtype
        queries = self.query_enc(Tensor(np.asarray(rows).astype(dtype)),
                                 row_mask=valid)
        values = self.value_enc(Tensor(np.asarray(value_rows).astype(dtype)))
        sa_mask = np.stack([self.locality_mask(v) for v in valid])[:, None]
        decoded = self.attn(queries, values, values, sa_mask=sa_mask)
        out = self.head(decoded)
        bins = CODEC.bin_count
        offsets = out.narrow(-1, 0, 3)
        bin_logits = out.narrow(-1, 3, bins)
        bin_residuals = out.narrow(-1, 3 + bins, bins)
        return offsets, bin_logits, bin_residuals

    def forward(self, pset: PositionPointSet, value_rows: np.ndarray):
        """Per-frame center offsets (L, 3), heading bin logits (L, 12) and
        per-bin residuals (L, 12), for the first `pset.length` frames."""
        n = pset.length
        valid = pset.valid_mask[:n]
        offsets, bin_logits, bin_residuals = self.forward_rows(
            pset.rows[None, :n], valid[None], value_rows[None])
        return (offsets.reshape((n, 3)),
                bin_logits.reshape((n, CODEC.bin_count)),
                bin_residuals.reshape((n, CODEC.bin_count)))

    def predict(self, pset: PositionPointSet, value_rows: np.ndarray):
        """Refined per-frame local centers and yaws for valid frames.

        Returns (centers (L, 3), yaws (L,), valid (L,) bool); invalid frames
        carry the proposal values unchanged.
        """
        with no_grad():
            offsets, bin_logits, bin_residuals = self.forward(pset, value_rows)
        n = pset.length
        valid = pset.valid_mask[:n]
        centers = pset.boxes_local[:n, :3].copy()
        yaws = pset.boxes_local[:n, 6].copy()
        best = bin_logits.data.argmax(axis=1)
        from offtrack.refine.heading import HALF_BIN
        residual = bin_residuals.data[np.arange(n), best] * HALF_BIN
        decoded_yaw = np.array([CODEC.decode(int(b), float(r))
                                for b, r in zip(best, residual)])
        centers[valid] = centers[valid] + offsets.data[valid]
        yaws[valid] = decoded_yaw[valid]
        return centers, yaws, valid


class ConfidenceRefiner(Module):
    def __init__(self, rng: np.random.Generator, d_model: int = 256,
                 hidden: int = 128, heads: int = 4):
        self.meta = np.array([d_model, hidden, heads], dtype=np.float64)
        self.enc = PointNetEncoder("confidence_query", rng, hidden, d_model)
        self.fuse = Linear(d_model, d_model, rng)
        self.head_cls = Linear(d_model, 1, rng, init_scale=0.01)
        self.head_iou = Linear(d_model, 1, rng, init_scale=0.01)

    def named_buffers(self) -> dict:
        out = super().named_buffers()
        out["meta"] = self.meta
        return out

    def forward(self, query_rows: np.ndarray):
        """Raw logits: (classification, iou regression), each (..., 1)."""
        dtype = self.head_cls.weight.data.dtype
        feats = self.enc(Tensor(np.asarray(query_rows).astype(dtype)))
        fused = self.fuse(feats.mean(axis=-2)).relu()
        return self.head_cls(fused), self.head_iou(fused)

    def predict(self, query_rows: np.ndarray) -> ScorePair:
        with no_grad():
            logit_cls, logit_iou = self.forward(query_rows)
        return ScorePair(logit_cls.sigmoid().item(), logit_iou.sigmoid().item())


def _fresh(arch_id: str, meta: np.ndarray, anchors=None):
    rng = np.random.default_rng(0)
    if arch_id == GRM_ARCH:
        d, h, heads, a, scaled = meta
        table = SizeAnchorTable(anchors if anchors is not None
                                else np.ones((int(a), 3)))
        return GeometryRefiner(table, rng, int(d), int(h), int(heads),
                               bool(scaled))
    if arch_id == PRM_ARCH:
        d, h, heads, window, scaled = meta
        return PositionRefiner(rng, int(d), int(h), int(heads), int(window),
                               bool(scaled))
    if arch_id == CRM_ARCH:
        d, h, heads = meta
        return ConfidenceRefiner(rng, int(d), int(h), int(heads))
    raise ValueError(f"unknown refiner architecture {arch_id!r}")


def save_refiner(model: Module, path) -> None:
    from offtrack.nn import save_checkpoint
    arch = {GeometryRefiner: GRM_ARCH, PositionRefiner: PRM_ARCH,
            ConfidenceRefiner: CRM_ARCH}[type(model)]
    save_checkpoint(path, arch, model.state_arrays())


def load_refiner(path) -> Module:
    from offtrack.nn import load_checkpoint
    arch, state = load_checkpoint(path)
    meta = state["buffer.meta"]
    model = _fresh(arch, meta, anchors=state.get("buffer.anchors"))
    model.load_state_arrays(state)
    model.set_training(False)
    return model
