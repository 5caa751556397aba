"""Progressive spatio-temporal perception network.

The forward pass runs on a mini-batch; every tensor carries a leading batch
axis ``B``.  Stages, in order:

1. project raw audio and patch features to width ``D``;
2. fuse audio and frames inside each segment (:func:`avf_fuse`) and embed
   each segment (:func:`segment_embed`);
3. let the question pick ``top_k`` segments (:func:`tssm_select`);
4. let the question pick ``top_m`` patches in every selected frame
   (:func:`srsm_select`);
5. let each frame's audio attend over its kept patches (:func:`avam_attend`);
6. fuse audio and frames over the whole video (:func:`lgpm_perceive`);
7. pool everything, gate with the question and classify
   (:func:`fuse_and_predict`).

Selection is hard: gradients reach only the gathered segments and patches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pstp import autodiff as ad
from pstp.autodiff import Tensor
from pstp.config import ModelConfig
from pstp.errors import ConfigError, ShapeError
from pstp.features import FeatureBundle, check_compatible
from pstp.nn import Linear, Module, MultiHeadAttention


@dataclass
class Batch:
    audio_raw: np.ndarray      # [B, K, T, D_a]
    visual_frame: np.ndarray   # [B, K, T, D]
    visual_patch: np.ndarray   # [B, K, T, M, D]
    question: np.ndarray       # [B, 1, D]
    labels: np.ndarray         # [B]

    def __len__(self) -> int:
        return len(self.labels)


def stack_bundles(bundles: Sequence[FeatureBundle], dtype=np.float32) -> Batch:
    if not bundles:
        raise ShapeError("cannot stack an empty list of bundles")
    return Batch(
        audio_raw=np.stack([b.audio_raw for b in bundles]).astype(dtype, copy=False),
        visual_frame=np.stack([b.visual_frame for b in bundles]).astype(dtype, copy=False),
        visual_patch=np.stack([b.visual_patch for b in bundles]).astype(dtype, copy=False),
        question=np.stack([b.question for b in bundles]).astype(dtype, copy=False),
        labels=np.array([b.answer for b in bundles], dtype=np.int64),
    )


@dataclass
class SelectionTrace:
    """Indices and head-averaged attention weights behind both selections.

    ``segment_indices [B, top_k]`` and ``patch_indices [B, Γ, top_m]`` are
    ascending.  ``patch_indices``/``patch_weights`` are ``None`` when the
    patch attention is disabled.
    """

    segment_indices: np.ndarray
    segment_weights: np.ndarray
    patch_indices: np.ndarray | None
    patch_weights: np.ndarray | None

    def sample(self, i: int) -> dict:
        out = {
            "segment_indices": self.segment_indices[i].tolist(),
            "segment_weights": self.segment_weights[i].tolist(),
        }
        if self.patch_indices is not None:
            out["patch_indices"] = self.patch_indices[i].tolist()
            out["patch_weights"] = self.patch_weights[i].tolist()
        return out


@dataclass
class ModuleOutputs:
    f_tssm: Tensor          # [B, top_k, T, D]
    f_tssm_audio: Tensor    # [B, Γ, D]
    f_tssm_patch: Tensor    # [B, Γ, M, D]
    f_srsm: Tensor          # [B, Γ, top_m, D]
    f_avam: Tensor | None   # [B, Γ, top_m, D]
    f_lgpm_a: Tensor | None # [B, K*T, D]
    f_lgpm_v: Tensor | None # [B, K*T, D]
    tssm_attended: Tensor   # [B, D], attention output restricted to kept segments


@dataclass
class ForwardResult:
    logits: Tensor
    probs: Tensor
    trace: SelectionTrace
    outputs: ModuleOutputs


# ------------------------------------------------------------------ helpers


def topk_ascending(weights: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries on the last axis, sorted ascending.

    Ties go to the lower index.
    """
    n = weights.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"cannot keep {k} of {n} entries")
    order = np.argsort(-weights, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def _attend_plain(q: Tensor, k: Tensor, scale: float) -> Tensor:
    weights = ad.softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)) * scale)
    return ad.matmul(weights, k)


def avf_fuse(audio: Tensor, visual: Tensor, layers: int = 1, scale_dim: int | None = None):
    """Residual self- plus cross-attention between two aligned sequences.

    ``a' = a + att(a, A, A) + att(a, V, V)`` and symmetrically for ``v``;
    attention is projection-free with scale ``1/sqrt(D)``.  Sequences run
    along axis ``-2``; any leading axes are batch axes.
    """
    if audio.shape != visual.shape:
        raise ShapeError(f"audio {audio.shape} and visual {visual.shape} differ")
    scale = 1.0 / math.sqrt(scale_dim or audio.shape[-1])
    a, v = audio, visual
    for _ in range(layers):
        a, v = (
            a + _attend_plain(a, a, scale) + ad.matmul(ad.softmax(ad.matmul(a, ad.swapaxes(v, -1, -2)) * scale), v),
            v + _attend_plain(v, v, scale) + ad.matmul(ad.softmax(ad.matmul(v, ad.swapaxes(a, -1, -2)) * scale), a),
        )
    return a, v


def lgpm_perceive(audio: Tensor, visual: Tensor, layers: int = 1):
    """The fusion of :func:`avf_fuse` applied over the whole video at once."""
    if audio.shape[-2] != visual.shape[-2]:
        raise ShapeError(f"audio length {audio.shape[-2]} != visual length {visual.shape[-2]}")
    return avf_fuse(audio, visual, layers)


def segment_embed(audio: Tensor, visual: Tensor, fc: Linear) -> Tensor:
    """Pool both modalities over snippets, concatenate, then ``relu(fc(.))``.

    ``[..., T, D]`` inputs give a ``[..., D]`` embedding.
    """
    pooled = ad.concat([ad.mean(audio, axis=-2), ad.mean(visual, axis=-2)], axis=-1)
    return ad.relu(fc(pooled))


def tssm_select(seg_embed: Tensor, question: Tensor, attn: MultiHeadAttention, top_k: int,
                logit_shift: float = 0.0):
    """Question-over-segments attention and hard top-k.

    Returns ``(indices [B, top_k], weights [B, K], attended [B, D])``; the
    attended vector sums value rows of the kept segments only.
    """
    K = seg_embed.shape[-2]
    if top_k > K:
        raise ConfigError(f"top_k={top_k} exceeds K={K}")
    weights, vh = attn.attend(question, seg_embed, seg_embed, logit_shift)  # [B,h,1,K]
    avg = weights.data.mean(axis=-3)[..., 0, :]                              # [B, K]
    idx = topk_ascending(avg, top_k)
    mask = np.zeros_like(avg)
    np.put_along_axis(mask, idx, 1.0, axis=-1)
    kept = weights * mask[:, None, None, :]
    attended = attn.o_proj(attn._merge(ad.matmul(kept, vh)))                 # [B,1,D]
    return idx, avg, attended.reshape(attended.shape[0], attended.shape[-1])


def srsm_select(patches: Tensor, question: Tensor, attn: MultiHeadAttention, top_m: int,
                logit_shift: float = 0.0):
    """Question-over-patches attention in every frame and hard top-m.

    ``patches [B, Γ, M, D]`` → ``(kept [B, Γ, top_m, D], indices, weights [B, Γ, M])``.
    The kept rows are the selected patches' attention contributions passed
    through the output projection.
    """
    B, G, M, D = patches.shape
    if top_m > M:
        raise ConfigError(f"top_m={top_m} exceeds M={M}")
    q = ad.broadcast_to(question.reshape(B, 1, 1, D), (B, G, 1, D))
    weights, vh = attn.attend(q, patches, patches, logit_shift)   # [B,G,h,1,M]
    avg = weights.data.mean(axis=-3)[..., 0, :]                    # [B,G,M]
    idx = topk_ascending(avg, top_m)
    rows = attn.key_contributions(weights, vh)                     # [B,G,M,D]
    kept = attn.o_proj(ad.batch_gather(rows, idx))
    return kept, idx, avg


def avam_attend(patches: Tensor, audio: Tensor, attn: MultiHeadAttention) -> Tensor:
    """Each frame's audio attends over its kept patches.

    The single attended row is added to every kept patch row, so
    ``[B, Γ, top_m, D]`` in gives ``[B, Γ, top_m, D]`` out.
    """
    if patches.shape[:2] != audio.shape[:2]:
        raise ShapeError(f"patch frames {patches.shape[:2]} vs audio frames {audio.shape[:2]}")
    B, G, _, D = patches.shape
    attended, _ = attn(audio.reshape(B, G, 1, D), patches, patches)  # [B,G,1,D]
    return patches + attended


def fuse_and_predict(outputs: ModuleOutputs, question: Tensor, fc: Linear, classifier: Linear):
    """Pool module outputs into tokens, gate with the question, classify.

    Visual tokens come from TSSM, SRSM, AVAM and LGPM, audio tokens from the
    selected audio and LGPM; absent modules contribute no token.
    """
    B = question.shape[0]
    tokens = [
        ad.mean(outputs.f_tssm, axis=(1, 2)) + outputs.tssm_attended,
        ad.mean(outputs.f_srsm, axis=(1, 2)),
    ]
    if outputs.f_avam is not None:
        tokens.append(ad.mean(outputs.f_avam, axis=(1, 2)))
    if outputs.f_lgpm_v is not None:
        tokens.append(ad.mean(outputs.f_lgpm_v, axis=1))
    tokens.append(ad.mean(outputs.f_tssm_audio, axis=1))
    if outputs.f_lgpm_a is not None:
        tokens.append(ad.mean(outputs.f_lgpm_a, axis=1))
    aggregate = ad.relu(ad.stack(tokens, axis=1))                 # [B, n_tokens, D]
    gated = ad.mean(aggregate, axis=1) * question.reshape(B, question.shape[-1])
    logits = classifier(fc(ad.tanh(gated)))
    return logits, ad.softmax(logits)


# -------------------------------------------------------------------- model


class PSTPNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9575]))
        D = cfg.D
        self.audio_proj = Linear(cfg.D_a, D, rng, dtype)
        self.patch_proj = Linear(D, D, rng, dtype)
        self.segment_fc = Linear(2 * D, D, rng, dtype)
        self.tssm_attn = MultiHeadAttention(D, cfg.heads, rng, dtype)
        if cfg.use_srsm:
            self.srsm_attn = MultiHeadAttention(D, cfg.heads, rng, dtype)
        if cfg.use_avam:
            self.avam_attn = MultiHeadAttention(D, cfg.heads, rng, dtype)
        self.fusion_fc = Linear(D, D, rng, dtype)
        self.classifier = Linear(D, cfg.C, rng, dtype)

    # parameter ownership, used by the profiler
    OWNERS = {
        "audio_proj": "input",
        "patch_proj": "input",
        "segment_fc": "tssm",
        "tssm_attn": "tssm",
        "srsm_attn": "srsm",
        "avam_attn": "avam",
        "fusion_fc": "fusion",
        "classifier": "fusion",
    }

    def params_by_module(self) -> dict[str, int]:
        out = {m: 0 for m in ("input", "tssm", "srsm", "avam", "lgpm", "fusion")}
        for name, p in self.named_parameters():
            out[self.OWNERS[name.split(".")[0]]] += p.data.size
        return out

    def check_batch(self, batch: Batch) -> None:
        B, K, T, M, D = batch.visual_patch.shape
        dims = {"K": K, "T": T, "M": M, "D": D, "D_a": batch.audio_raw.shape[-1]}
        check_compatible(dims, self.cfg, "batch")

    def forward(self, batch: Batch, logit_shift: float = 0.0) -> ForwardResult:
        cfg = self.cfg
        self.check_batch(batch)
        B = len(batch)
        K, T, M, D = cfg.K, cfg.T, cfg.M, cfg.D
        G = cfg.gamma
        # inputs are constants; the gradient-check path swaps in tracked tensors
        audio_raw = _as_input(batch.audio_raw, self.dtype)
        frames = _as_input(batch.visual_frame, self.dtype)
        patches_raw = _as_input(batch.visual_patch, self.dtype)
        question = _as_input(batch.question, self.dtype)

        audio = self.audio_proj(audio_raw)                      # [B,K,T,D]
        patches = self.patch_proj(patches_raw)                  # [B,K,T,M,D]

        a_hat, v_hat = avf_fuse(audio, frames, cfg.fusion_layers)
        seg = segment_embed(a_hat, v_hat, self.segment_fc)      # [B,K,D]
        seg_idx, seg_w, attended = tssm_select(seg, question, self.tssm_attn, cfg.top_k, logit_shift)

        f_tssm = ad.batch_gather(v_hat, seg_idx)                            # [B,top_k,T,D]
        f_tssm_audio = ad.batch_gather(audio, seg_idx).reshape(B, G, D)
        f_tssm_patch = ad.batch_gather(patches, seg_idx).reshape(B, G, M, D)

        if cfg.use_srsm:
            f_srsm, patch_idx, patch_w = srsm_select(
                f_tssm_patch, question, self.srsm_attn, cfg.top_m, logit_shift
            )
        else:
            f_srsm, patch_idx, patch_w = f_tssm_patch, None, None

        f_avam = avam_attend(f_srsm, f_tssm_audio, self.avam_attn) if cfg.use_avam else None

        if cfg.use_lgpm:
            f_lgpm_a, f_lgpm_v = lgpm_perceive(
                audio.reshape(B, K * T, D), frames.reshape(B, K * T, D), cfg.fusion_layers
            )
        else:
            f_lgpm_a = f_lgpm_v = None

        outputs = ModuleOutputs(
            f_tssm=f_tssm, f_tssm_audio=f_tssm_audio, f_tssm_patch=f_tssm_patch,
            f_srsm=f_srsm, f_avam=f_avam, f_lgpm_a=f_lgpm_a, f_lgpm_v=f_lgpm_v,
            tssm_attended=attended,
        )
        logits, probs = fuse_and_predict(outputs, question, self.fusion_fc, self.classifier)
        trace = SelectionTrace(seg_idx, seg_w, patch_idx, patch_w)
        return ForwardResult(logits, probs, trace, outputs)

    __call__ = forward

    def loss(self, batch: Batch) -> tuple[Tensor, ForwardResult]:
        result = self.forward(batch)
        return ad.cross_entropy(result.logits, batch.labels), result


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))
