"""Expression correction from multi-view images and the momentum bank.

The correction network encodes every view of a timestamp, fuses the
per-view features with single-head cross-attention and regresses an
expression offset.  The attention query is a learned vector plus a
projection of the feature of the view being corrected, so every view gets
its own correction while attending to all of them.

:class:`ExpressionBank` keeps one EMA slot per (timestamp, view); the value
applied to the head model is the mean over the view slots of a timestamp.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn


class CorrectionError(ValueError):
    pass


def momentum_schedule(iteration, total_iterations, m_start=0.9, m_end=0.1):
    """Linearly decayed EMA momentum."""
    if total_iterations <= 0:
        return m_start
    if not 0 <= iteration <= total_iterations:
        raise CorrectionError(f"iteration {iteration} outside [0, {total_iterations}]")
    return m_start + (m_end - m_start) * iteration / total_iterations


@dataclass
class ExpressionBank:
    view_count: int
    n_expr: int
    momentum: float = 0.9
    entries: dict = field(default_factory=dict)

    def slots(self, t) -> np.ndarray:
        if t not in self.entries:
            self.entries[t] = np.zeros((self.view_count, self.n_expr))
        return self.entries[t]

    def update(self, t, view, delta, momentum=None):
        """``slot[t, view] <- m * slot + (1 - m) * delta``; other slots untouched."""
        if not 0 <= view < self.view_count:
            raise CorrectionError(f"view {view} out of range for {self.view_count} bank slots")
        m = self.momentum if momentum is None else momentum
        if not 0.0 <= m < 1.0:
            raise CorrectionError(f"momentum {m} outside [0, 1)")
        slot = self.slots(t)
        slot[view] = m * slot[view] + (1.0 - m) * np.asarray(delta, float)
        return self

    def correction(self, t) -> np.ndarray:
        if t not in self.entries:
            return np.zeros(self.n_expr)
        return self.entries[t].mean(axis=0)

    def apply(self, t, psi_init):
        return np.asarray(psi_init, float) + self.correction(t)

    def summary(self):
        """Per-timestamp slot mean and inter-view variance (averaged over coefficients)."""
        rows = []
        for t in sorted(self.entries):
            s = self.entries[t]
            rows.append({"t": int(t), "mean": s.mean(axis=0).tolist(),
                         "inter_view_variance": float(s.var(axis=0).mean())})
        return rows


def bank_update(bank: ExpressionBank, t, view_i, delta, momentum=None) -> ExpressionBank:
    return bank.update(t, view_i, delta, momentum)


def bank_apply(bank: ExpressionBank, t, psi_init):
    return bank.apply(t, psi_init)


class CorrectionNet:
    """Encoder + cross-attention + MLP producing an expression offset."""

    def __init__(self, n_expr, seed=0, d_feat=64, hidden=128, store=None):
        self.n_expr = n_expr
        self.d_feat = d_feat
        if store is not None:
            self.store = store
            return
        rng = np.random.default_rng(seed)
        s = nn.ParamStore()
        nn.add_encoder(s, "corr.enc", rng, d_feat=d_feat)
        s.add("corr.attn.q0", rng.normal(scale=1.0 / np.sqrt(d_feat), size=d_feat))
        for name in ("wq", "wk", "wv"):
            s.add(f"corr.attn.{name}", nn.kaiming_uniform(rng, d_feat, (d_feat, d_feat)))
        nn.add_mlp(s, "corr.mlp", [d_feat, hidden, hidden, n_expr], rng, zero_last=True)
        self.store = s

    def encode(self, images):
        feats, caches = [], []
        for img in images:
            f, c = nn.conv_encode(self.store, "corr.enc", img)
            feats.append(f)
            caches.append(c)
        return np.stack(feats), caches

    def regress(self, images, query_view=0):
        """Correction for view ``query_view`` from all ``images`` of a timestamp.

        Returns ``(delta_psi, fused_feature, cache)``.
        """
        deltas, fused, cache = self.regress_views(images, [query_view])
        return deltas[0], fused[0], cache

    def regress_views(self, images, query_views=None):
        """Corrections for several query views sharing one encoding pass.

        Returns ``(deltas (Q, n_expr), fused (Q, d_feat), cache)``.
        """
        if len(images) == 0:
            raise CorrectionError("correction needs at least one view")
        query_views = list(range(len(images))) if query_views is None else list(query_views)
        for qv in query_views:
            if not 0 <= qv < len(images):
                raise CorrectionError(f"query view {qv} out of range")
        shape0 = np.shape(images[0])
        if any(np.shape(im) != shape0 for im in images):
            raise CorrectionError("all views must share one image size")
        s = self.store
        F, enc_caches = self.encode(images)
        K = F @ s["corr.attn.wk"]
        Vv = F @ s["corr.attn.wv"]
        deltas, fused, per_query = [], [], []
        for qv in query_views:
            q = s["corr.attn.q0"] + F[qv] @ s["corr.attn.wq"]
            f, attn_cache = nn.softmax_attention(q, K, Vv)
            d, mlp_cache = nn.mlp(s, "corr.mlp", f)
            deltas.append(d)
            fused.append(f)
            per_query.append((qv, attn_cache, mlp_cache))
        cache = {"F": F, "enc": enc_caches, "queries": per_query}
        return np.stack(deltas), np.stack(fused), cache

    def backward(self, cache, d_delta=None, d_fused=None):
        """Backward for :meth:`regress` / :meth:`regress_views`.

        ``d_delta`` and ``d_fused`` are per query (leading axis Q) or, for a
        single query, plain vectors.  Returns image gradients.
        """
        s = self.store
        Qn = len(cache["queries"])
        d_delta = None if d_delta is None else np.asarray(d_delta, float).reshape(Qn, -1)
        d_fused = None if d_fused is None else np.asarray(d_fused, float).reshape(Qn, -1)
        F = cache["F"]
        dF = np.zeros_like(F)
        dK = np.zeros((F.shape[0], self.d_feat))
        dV = np.zeros((F.shape[0], self.d_feat))
        for i, (qv, attn_cache, mlp_cache) in enumerate(cache["queries"]):
            g = np.zeros(self.d_feat) if d_fused is None else d_fused[i].copy()
            if d_delta is not None and d_delta[i].any():
                g = g + nn.mlp_backward(s, mlp_cache, d_delta[i])
            dq, dKi, dVi = nn.softmax_attention_backward(attn_cache, g)
            dK += dKi
            dV += dVi
            s.accumulate("corr.attn.q0", dq)
            s.accumulate("corr.attn.wq", np.outer(F[qv], dq))
            dF[qv] += s["corr.attn.wq"] @ dq
        s.accumulate("corr.attn.wk", F.T @ dK)
        s.accumulate("corr.attn.wv", F.T @ dV)
        dF += dK @ s["corr.attn.wk"].T + dV @ s["corr.attn.wv"].T
        return [nn.conv_encode_backward(s, c, dF[i]) for i, c in enumerate(cache["enc"])]


def regress_correction(net: CorrectionNet, frames, query_view=0):
    """``(delta_psi, fused_feature)`` for one timestamp's views."""
    delta, fused, _ = net.regress(frames, query_view)
    return delta, fused
