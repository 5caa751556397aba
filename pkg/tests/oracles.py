"""Loop-level reference implementations used as independent test oracles."""
import math

import numpy as np


def softmax_rows(z):
    out = np.empty_like(z)
    for i, row in enumerate(z):
        e = np.exp(row - row.max())
        out[i] = e / e.sum()
    return out


def plain_attention(q, k, v, d):
    """softmax(q k^T / sqrt(d)) v with explicit loops over rows."""
    logits = np.zeros((q.shape[0], k.shape[0]))
    for i in range(q.shape[0]):
        for j in range(k.shape[0]):
            logits[i, j] = sum(q[i, c] * k[j, c] for c in range(q.shape[1])) / math.sqrt(d)
    return softmax_rows(logits) @ v


def avf_layer(a, v):
    """One residual self- plus cross-attention update of both sequences."""
    d = a.shape[1]
    a_new = a + plain_attention(a, a, a, d) + plain_attention(a, v, v, d)
    v_new = v + plain_attention(v, v, v, d) + plain_attention(v, a, a, d)
    return a_new, v_new


def head_attention(mha, q, k, v):
    """Head-by-head recomputation of a learned attention block."""
    Q = q @ mha.q_proj.weight.data + mha.q_proj.bias.data
    K = k @ mha.k_proj.weight.data + mha.k_proj.bias.data
    V = v @ mha.v_proj.weight.data + mha.v_proj.bias.data
    dh = mha.head_dim
    heads, weights = [], []
    for h in range(mha.heads):
        cols = slice(h * dh, (h + 1) * dh)
        w = softmax_rows(Q[:, cols] @ K[:, cols].T / math.sqrt(dh))
        weights.append(w)
        heads.append(w @ V[:, cols])
    merged = np.concatenate(heads, axis=1)
    return merged @ mha.o_proj.weight.data + mha.o_proj.bias.data, np.mean(weights, axis=0)


def fusion_head(outputs, question, fc, classifier, b=0):
    """Token pooling, question gating and classification for sample ``b``."""
    o = {name: None if getattr(outputs, name) is None else getattr(outputs, name).data[b]
         for name in ("f_tssm", "f_srsm", "f_avam", "f_lgpm_v", "f_tssm_audio", "f_lgpm_a",
                      "tssm_attended")}
    tokens = [o["f_tssm"].reshape(-1, o["f_tssm"].shape[-1]).mean(axis=0) + o["tssm_attended"],
              o["f_srsm"].reshape(-1, o["f_srsm"].shape[-1]).mean(axis=0)]
    if o["f_avam"] is not None:
        tokens.append(o["f_avam"].reshape(-1, o["f_avam"].shape[-1]).mean(axis=0))
    if o["f_lgpm_v"] is not None:
        tokens.append(o["f_lgpm_v"].mean(axis=0))
    tokens.append(o["f_tssm_audio"].mean(axis=0))
    if o["f_lgpm_a"] is not None:
        tokens.append(o["f_lgpm_a"].mean(axis=0))
    agg = np.maximum(np.stack(tokens), 0.0)
    gated = agg.mean(axis=0) * question[b].reshape(-1)
    hidden = np.tanh(gated) @ fc.weight.data + fc.bias.data
    return hidden @ classifier.weight.data + classifier.bias.data
