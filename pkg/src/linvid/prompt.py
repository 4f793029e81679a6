"""Sandwich prompt assembly: instruction prefix, visual tokens, instruction suffix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TextTokens:
    ids: list
    source_text: str = ""

    def __len__(self):
        return len(self.ids)


def tokenize_stub(text):
    """Byte-level tokenizer: one id per UTF-8 byte."""
    return TextTokens(list(text.encode("utf-8")), text)


def detokenize(tokens):
    ids = tokens.ids if isinstance(tokens, TextTokens) else tokens
    return bytes(ids).decode("utf-8")


@dataclass
class PromptLayout:
    prefix_range: tuple
    visual_range: tuple
    suffix_range: tuple
    frame_boundaries: list

    @property
    def length(self):
        return self.suffix_range[1]

    @classmethod
    def build(cls, n_prefix, frame_lengths, n_suffix):
        starts = []
        pos = n_prefix
        for n in frame_lengths:
            starts.append(pos)
            pos += n
        return cls((0, n_prefix), (n_prefix, pos), (pos, pos + n_suffix), starts)

    def to_dict(self):
        return {
            "prefix_range": list(self.prefix_range),
            "visual_range": list(self.visual_range),
            "suffix_range": list(self.suffix_range),
            "frame_boundaries": list(self.frame_boundaries),
            "length": self.length,
        }


def assemble_sandwich(instruction_prefix: TextTokens, visual, instruction_suffix: TextTokens, embed_table):
    """Embedded prefix ++ every frame's tokens in order ++ embedded suffix.

    ``visual`` is a list of :class:`~linvid.vision.FrameEmbedding` (or
    ``(n, d)`` arrays). Returns ``(sequence, layout)``.
    """
    frames = [v.array() if hasattr(v, "array") else np.asarray(v) for v in visual]
    if not frames or sum(len(f) for f in frames) == 0:
        raise ValueError("sandwich prompt needs at least one visual token")
    embed_table = np.asarray(embed_table)
    d = embed_table.shape[1]
    for f in frames:
        if f.shape[-1] != d:
            raise ValueError(f"visual width {f.shape[-1]} != text embedding width {d}")
    pre = embed_table[instruction_prefix.ids].reshape(-1, d)
    suf = embed_table[instruction_suffix.ids].reshape(-1, d)
    seq = np.concatenate([pre] + [f.astype(embed_table.dtype) for f in frames] + [suf], axis=0)
    layout = PromptLayout.build(len(pre), [len(f) for f in frames], len(suf))
    return seq, layout
