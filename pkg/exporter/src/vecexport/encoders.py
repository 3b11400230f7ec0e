"""Sentence-encoder backends.

``resolve_encoder`` maps a model identifier to a backend:

* ``debug:<dim>``    deterministic hashed-projection encoder, no downloads;
                     useful for tests and offline integration runs
* anything else      a Hugging Face transformer loaded locally through the
                     ``transformers`` library (install the ``hf`` extra)
"""

from __future__ import annotations

import numpy as np


class EncoderLoadError(RuntimeError):
    pass


class DebugEncoder:
    """Seeded random projection of hashed token counts; deterministic across
    runs and platforms, shaped like a real sentence encoder."""

    def __init__(self, dim: int, max_tokens: int = 512, pooling: str = "mean"):
        if dim < 2:
            raise EncoderLoadError(f"debug encoder dim must be >= 2, got {dim}")
        self.dim = dim
        self.max_tokens = max_tokens
        self._buckets = 2048
        rng = np.random.default_rng(20240501)
        self._projection = rng.standard_normal((self._buckets, dim)) / np.sqrt(dim)

    def encode_batch(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            tokens = text.lower().split()[: self.max_tokens]
            counts = np.zeros(self._buckets)
            for tok in tokens:
                h = 14695981039346656037
                for byte in tok.encode("utf-8"):
                    h = ((h ^ byte) * 1099511628211) & ((1 << 64) - 1)
                counts[h % self._buckets] += 1.0
            norm = np.linalg.norm(counts)
            if norm > 0:
                counts /= norm
            out[i] = np.tanh(counts @ self._projection)
        return out


class HFEncoder:
    """Transformer encoder with cls or mean pooling over the last hidden state."""

    def __init__(self, model_id: str, pooling: str = "mean",
                 max_tokens: int = 512, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise EncoderLoadError(
                "transformers/torch are not installed; install the 'hf' extra") from exc
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(model_id)
            self._model = AutoModel.from_pretrained(model_id).to(device).eval()
        except Exception as exc:
            raise EncoderLoadError(f"failed to load encoder {model_id!r}: {exc}") from exc
        self._torch = torch
        self._device = device
        self.pooling = pooling
        self.max_tokens = max_tokens
        self.dim = int(self._model.config.hidden_size)

    def encode_batch(self, texts: list[str]) -> np.ndarray:
        torch = self._torch
        batch = self._tokenizer(texts, padding=True, truncation=True,
                                max_length=self.max_tokens, return_tensors="pt")
        batch = {k: v.to(self._device) for k, v in batch.items()}
        with torch.no_grad():
            hidden = self._model(**batch).last_hidden_state
        if self.pooling == "cls":
            pooled = hidden[:, 0, :]
        else:
            mask = batch["attention_mask"].unsqueeze(-1).to(hidden.dtype)
            pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1)
        return pooled.cpu().double().numpy()


def resolve_encoder(model_id: str, pooling: str, max_tokens: int):
    if pooling not in ("cls", "mean"):
        raise ValueError(f"pooling must be cls or mean, got {pooling!r}")
    if model_id.startswith("debug:"):
        return DebugEncoder(dim=int(model_id.split(":", 1)[1]),
                            max_tokens=max_tokens, pooling=pooling)
    return HFEncoder(model_id, pooling=pooling, max_tokens=max_tokens)
