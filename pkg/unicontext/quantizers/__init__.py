from __future__ import annotations

from unicontext.quantizers.annotations import (
    BBox,
    dequantize_bbox,
    encode_category,
    quantize_bbox,
)
from unicontext.quantizers.bpe import BpeTokenizer, decode_text, encode_text, train_bpe
from unicontext.quantizers.codebook import (
    Codebook,
    dequantize_image,
    quantize_image,
    train_codebook,
)

__all__ = [
    "BBox",
    "BpeTokenizer",
    "Codebook",
    "decode_text",
    "dequantize_bbox",
    "dequantize_image",
    "encode_category",
    "encode_text",
    "quantize_bbox",
    "quantize_image",
    "train_bpe",
    "train_codebook",
]
