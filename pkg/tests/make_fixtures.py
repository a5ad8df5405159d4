"""Regenerate tests/data: a toy 2-block decoder checkpoint pair and its golden edit.

    python tests/make_fixtures.py
"""

from pathlib import Path

import torch
from safetensors.torch import save_file

from reference_pome import reference_checkpoint

DATA = Path(__file__).parent / "data"
HIDDEN, INTER, VOCAB, BLOCKS = 4, 8, 16, 2


def toy_shapes():
    shapes = {"model.embed_tokens.weight": (VOCAB, HIDDEN),
              "model.norm.weight": (HIDDEN,),
              "lm_head.weight": (VOCAB, HIDDEN)}
    for i in range(BLOCKS):
        p = f"model.layers.{i}."
        shapes[p + "input_layernorm.weight"] = (HIDDEN,)
        shapes[p + "post_attention_layernorm.weight"] = (HIDDEN,)
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            shapes[p + f"self_attn.{proj}.weight"] = (HIDDEN, HIDDEN)
        shapes[p + "mlp.gate_proj.weight"] = (INTER, HIDDEN)
        shapes[p + "mlp.up_proj.weight"] = (INTER, HIDDEN)
        shapes[p + "mlp.down_proj.weight"] = (HIDDEN, INTER)
    return shapes


def main():
    DATA.mkdir(exist_ok=True)
    gen = torch.Generator().manual_seed(20240917)
    pre, ft = {}, {}
    for name, shape in sorted(toy_shapes().items()):
        w = torch.randn(shape, generator=gen, dtype=torch.float32) * 0.5
        if len(shape) == 1:
            w = w.abs() + 1.0
        d = torch.randn(shape, generator=gen, dtype=torch.float32) * 0.05
        pre[name] = w.to(torch.bfloat16)
        ft[name] = (w + d).to(torch.bfloat16)
    save_file(pre, str(DATA / "toy_pre.safetensors"), metadata={"format": "pt"})
    save_file(ft, str(DATA / "toy_ft.safetensors"), metadata={"format": "pt"})
    reference_checkpoint(str(DATA / "toy_pre.safetensors"), str(DATA / "toy_ft.safetensors"),
                         str(DATA / "toy_golden_up_proj.safetensors"))


if __name__ == "__main__":
    main()
