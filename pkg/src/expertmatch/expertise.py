"""Expert encoder: profile-queried multi-head attention over dialogue
embeddings, with ablation and alternative-attention modes, plus attention-based
keyword explanations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Param, ShapeError, SplitMix64, Tape, Tensor, xavier_param

MODE_FULL = "full"
MODE_NO_PROFILE = "no_profile"
MODE_NO_DIALOGUE = "no_dialogue"
MODE_DOT_ATT = "dot_att"
MODE_CAT_ATT = "cat_att"

ATTENTION_MODES = (MODE_FULL, MODE_NO_PROFILE, MODE_NO_DIALOGUE, MODE_DOT_ATT, MODE_CAT_ATT)


class EmptyDialoguesError(ValueError):
    """Attention over zero dialogues; callers must filter such doctors."""


@dataclass
class DoctorEncoderParams:
    mode: str
    heads: int
    head_dim: int
    wq: list[Param]
    wk: list[Param]
    wv: list[Param]
    wo: Param | None
    learned_query: Param | None
    cat_w: Param | None
    cat_v: Param | None

    @classmethod
    def create(cls, dim: int, heads: int, mode: str, seed: int) -> "DoctorEncoderParams":
        if mode not in ATTENTION_MODES:
            raise ValueError(f"unknown encoder mode {mode!r}")
        rng = SplitMix64(seed)
        if mode in (MODE_FULL, MODE_NO_PROFILE, MODE_NO_DIALOGUE):
            if heads < 1:
                raise ValueError(f"head count must be >= 1, got {heads}")
            if dim % heads != 0:
                raise ValueError(
                    f"embedding dim {dim} is not divisible by head count {heads}")
            head_dim = dim // heads
            wq = [xavier_param(rng, dim, head_dim, f"doctor.Wq.{j}") for j in range(heads)]
            wk = [xavier_param(rng, dim, head_dim, f"doctor.Wk.{j}") for j in range(heads)]
            wv = [xavier_param(rng, dim, head_dim, f"doctor.Wv.{j}") for j in range(heads)]
            wo = xavier_param(rng, heads * head_dim, dim, "doctor.Wo")
            learned_query = (Param(np.zeros((1, dim)), "doctor.learned_query")
                             if mode == MODE_NO_PROFILE else None)
            return cls(mode, heads, head_dim, wq, wk, wv, wo, learned_query, None, None)
        # single-context attention variants keep the embeddings un-projected
        cat_w = cat_v = None
        if mode == MODE_CAT_ATT:
            cat_w = xavier_param(rng, 2 * dim, dim, "doctor.cat_w")
            cat_v = xavier_param(rng, dim, 1, "doctor.cat_v")
        return cls(mode, 1, dim, [], [], [], None, None, cat_w, cat_v)

    def params(self) -> list[Param]:
        out: list[Param] = [*self.wq, *self.wk, *self.wv]
        for p in (self.wo, self.learned_query, self.cat_w, self.cat_v):
            if p is not None:
                out.append(p)
        return out


@dataclass
class DoctorEmbedding:
    vector: Tensor
    attention_maps: np.ndarray  # heads x dialogues, rows sum to 1


def attention(tape: Tape, q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention for a single query row.

    weights = softmax(q k^T / sqrt(dim)), output = weights v.
    """
    if k.rows == 0:
        raise EmptyDialoguesError("attention needs at least one key/value row")
    if q.rows != 1 or q.cols != k.cols or k.shape != v.shape:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    logits = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(q.cols))
    weights = tape.row_softmax(logits)
    return tape.matmul(weights, v), weights


def encode_doctor(profile_vec: Tensor | None, dialogue_vecs: Tensor | None,
                  params: DoctorEncoderParams, tape: Tape | None = None) -> DoctorEmbedding:
    """Build the doctor embedding for the configured mode.

    full:        profile queries multi-head attention over the dialogue matrix
    no_profile:  a learned query vector replaces the profile
    no_dialogue: the profile is its own one-element key/value sequence
    dot_att:     single-head Luong dot attention, no projections
    cat_att:     single-head Luong concat attention, no output projection
    """
    t = tape if tape is not None else Tape(recording=False)
    mode = params.mode

    if mode in (MODE_FULL, MODE_NO_PROFILE, MODE_NO_DIALOGUE):
        if mode == MODE_NO_DIALOGUE:
            if profile_vec is None:
                raise ValueError("no_dialogue mode needs a profile vector")
            context = profile_vec
            query = profile_vec
        else:
            if dialogue_vecs is None or dialogue_vecs.rows == 0:
                raise EmptyDialoguesError(
                    f"{mode} mode needs at least one dialogue embedding")
            context = dialogue_vecs
            if mode == MODE_NO_PROFILE:
                query = params.learned_query
            else:
                if profile_vec is None:
                    raise ValueError("full mode needs a profile vector")
                query = profile_vec
        head_outs, head_weights = [], []
        for j in range(params.heads):
            qj = t.matmul(query, params.wq[j])
            kj = t.matmul(context, params.wk[j])
            vj = t.matmul(context, params.wv[j])
            hj, wj = attention(t, qj, kj, vj)
            head_outs.append(hj)
            head_weights.append(wj.data[0])
        vector = t.matmul(t.concat_cols(head_outs), params.wo)
        return DoctorEmbedding(vector, np.vstack(head_weights))

    if dialogue_vecs is None or dialogue_vecs.rows == 0:
        raise EmptyDialoguesError(f"{mode} mode needs at least one dialogue embedding")
    if profile_vec is None:
        raise ValueError(f"{mode} mode needs a profile vector")

    if mode == MODE_DOT_ATT:
        scores = t.matmul(profile_vec, t.transpose(dialogue_vecs))
    else:  # cat_att
        n = dialogue_vecs.rows
        ones = t.const(np.ones((n, 1)))
        tiled_profile = t.matmul(ones, profile_vec)
        joint = t.concat_cols([tiled_profile, dialogue_vecs])
        hidden = t.tanh(t.matmul(joint, params.cat_w))
        scores = t.transpose(t.matmul(hidden, params.cat_v))
    weights = t.row_softmax(scores)
    vector = t.matmul(weights, dialogue_vecs)
    return DoctorEmbedding(vector, weights.data.copy())


@dataclass(frozen=True)
class HeadExplanation:
    head: int
    weights: tuple[float, ...]          # over the doctor's dialogues
    top_tokens: tuple[tuple[str, float], ...]  # (token, summed weight)


def explain_heads(attention_maps: np.ndarray,
                  dialogue_token_sets: Sequence[frozenset[str] | set[str]],
                  k: int) -> list[HeadExplanation]:
    """Rank tokens per head by the attention mass of the dialogues containing them.

    A token's score is the sum of the head's weights over the dialogues where it
    occurs; ties break lexicographically.
    """
    if attention_maps.shape[1] != len(dialogue_token_sets):
        raise ShapeError("explain_heads", attention_maps.shape,
                         (len(dialogue_token_sets),))
    out = []
    for j in range(attention_maps.shape[0]):
        weights = attention_maps[j]
        scores: dict[str, float] = {}
        for w, tokens in zip(weights, dialogue_token_sets):
            for tok in tokens:
                scores[tok] = scores.get(tok, 0.0) + float(w)
        ranked = sorted(((t, s) for t, s in scores.items() if s > 0.0),
                        key=lambda kv: (-kv[1], kv[0]))[:k]
        out.append(HeadExplanation(head=j, weights=tuple(float(w) for w in weights),
                                   top_tokens=tuple(ranked)))
    return out
