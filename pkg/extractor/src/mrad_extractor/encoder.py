"""Dual-branch CLIP vision encoding.

The global branch is the stock frozen encoder: standard Q-K attention,
class token read from the final layer (the model's pooled output). The
local branch reruns the same layers with the attention logits computed
from the value projections alone (value-value attention), which keeps
each patch token anchored to its local context instead of a few
globally dominant tokens, at the cost of the global aggregation the
class token already provides. Both branches share every parameter and
the local branch never mutates the model, so the global branch stays
bit-identical to the stock encoder by construction.

Features are emitted un-normalized; the retrieval engine owns
l2 normalization.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image
from transformers import CLIPVisionModel

from .errors import ExtractorError

DEFAULT_MODEL = "openai/clip-vit-large-patch14-336"

# CLIP training statistics (RGB order).
_PIXEL_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
_PIXEL_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)


def preprocess_image(image: Image.Image, resolution: int) -> np.ndarray:
    """PIL image -> normalized float32 CHW array at resolution**2.

    Square bicubic resize (no center crop): anomaly masks are aligned
    to the full frame, so cropping would desynchronize them.
    """
    rgb = image.convert("RGB").resize(
        (resolution, resolution), Image.Resampling.BICUBIC
    )
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - _PIXEL_MEAN) / _PIXEL_STD
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


class DualBranchEncoder:
    """Frozen CLIP vision tower emitting (class token, V-V patch tokens)."""

    def __init__(self, model_name_or_path: str = DEFAULT_MODEL, device: str = "cpu"):
        model = CLIPVisionModel.from_pretrained(model_name_or_path)
        # Older releases nest the tower under .vision_model.
        self._core = getattr(model, "vision_model", model)
        self._model = model.to(device).eval()
        self._model.requires_grad_(False)
        self._device = torch.device(device)

    @property
    def d(self) -> int:
        return int(self._core.config.hidden_size)

    @property
    def patch_size(self) -> int:
        return int(self._core.config.patch_size)

    def grid_size(self, resolution: int) -> int:
        """Patches per side at ``resolution``; requires exact tiling."""
        p = self.patch_size
        if resolution < p or resolution % p != 0:
            raise ExtractorError(
                f"resolution {resolution} is not a multiple of the "
                f"model's patch size {p}"
            )
        return resolution // p

    def _value_value_forward(self, hidden: torch.Tensor) -> torch.Tensor:
        # Rerun every encoder layer with V V^T attention logits; norms,
        # output projection, MLP and residuals are the stock modules in
        # the stock order.
        for layer in self._core.encoder.layers:
            attn = layer.self_attn
            residual = hidden
            x = layer.layer_norm1(hidden)
            v = attn.v_proj(x)
            b, n, d = v.shape
            heads = attn.num_heads
            vh = v.view(b, n, heads, d // heads).transpose(1, 2)
            logits = torch.matmul(vh, vh.transpose(-1, -2)) * attn.scale
            weights = torch.softmax(logits, dim=-1, dtype=torch.float32).to(v.dtype)
            out = torch.matmul(weights, vh).transpose(1, 2).reshape(b, n, d)
            hidden = residual + attn.out_proj(out)
            residual = hidden
            hidden = residual + layer.mlp(layer.layer_norm2(hidden))
        return hidden

    @torch.inference_mode()
    def encode(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Encode a preprocessed batch (B, 3, R, R) -> (cls, patches).

        Returns float32 arrays of shape (B, d) and (B, u, d). Position
        encodings are interpolated when R differs from the model's
        native resolution.
        """
        pixels = np.asarray(pixels, dtype=np.float32)
        if pixels.ndim != 4 or pixels.shape[1] != 3:
            raise ExtractorError(
                f"expected pixel batch of shape (B, 3, R, R), got {pixels.shape}"
            )
        self.grid_size(int(pixels.shape[-1]))
        px = torch.from_numpy(np.ascontiguousarray(pixels)).to(self._device)
        native = int(self._core.config.image_size)
        interp = px.shape[-2] != native or px.shape[-1] != native

        hidden = self._core.embeddings(px, interpolate_pos_encoding=interp)
        hidden = self._core.pre_layrnorm(hidden)

        qk = self._core.encoder(inputs_embeds=hidden).last_hidden_state
        cls = self._core.post_layernorm(qk[:, 0, :])

        vv = self._value_value_forward(hidden)
        patches = self._core.post_layernorm(vv[:, 1:, :])

        return (
            cls.cpu().numpy().astype(np.float32),
            patches.cpu().numpy().astype(np.float32),
        )
