"""Synthetic GPT-style models used by the simulator and the demos."""
from __future__ import annotations

from .topology import REPLICATED, ModelSpec, TensorSpec

VOCAB = 50304

# nominal size (billions) -> (layers, hidden)
GPT_SHAPES = {
    1.7: (24, 2304),
    7: (32, 4096),
    14: (44, 5120),
    20: (44, 6144),
    30: (48, 7168),
    70: (80, 8448),
    175: (96, 12288),
}


def gpt_layer_tensors(layer: int, hidden: int, ffn: int) -> list[TensorSpec]:
    p = f"layers.{layer}"
    return [
        TensorSpec(f"{p}.attn.qkv", layer, (3 * hidden, hidden), 0),
        TensorSpec(f"{p}.attn.proj", layer, (hidden, hidden), 1),
        TensorSpec(f"{p}.mlp.fc1", layer, (ffn, hidden), 0),
        TensorSpec(f"{p}.mlp.fc2", layer, (hidden, ffn), 1),
        TensorSpec(f"{p}.ln1", layer, (hidden,), REPLICATED),
        TensorSpec(f"{p}.ln2", layer, (hidden,), REPLICATED),
    ]


def gpt_model(num_layers: int, hidden: int, *, vocab: int = VOCAB, ffn_mult: int = 4,
              bytes_per_element: int = 2, state_multiplier: float = 16.0, name: str = "") -> ModelSpec:
    tensors = [TensorSpec("embedding", 0, (vocab, hidden), 0)]
    for layer in range(num_layers):
        tensors += gpt_layer_tensors(layer, hidden, ffn_mult * hidden)
    tensors.append(TensorSpec("final_ln", num_layers - 1, (hidden,), REPLICATED))
    tensors.append(TensorSpec("lm_head", num_layers - 1, (vocab, hidden), 0))
    return ModelSpec(num_layers, tuple(tensors), bytes_per_element, state_multiplier,
                     name or f"gpt-L{num_layers}-h{hidden}")


def gpt_by_size(billions: float, **kw) -> ModelSpec:
    try:
        layers, hidden = GPT_SHAPES[billions]
    except KeyError:
        raise KeyError(f"no preset for {billions}B; known sizes {sorted(GPT_SHAPES)}") from None
    kw.setdefault("name", f"gpt-{billions:g}b")
    return gpt_model(layers, hidden, **kw)


def toy_model(num_layers: int = 2, dims=(8, 8), *, bytes_per_element: int = 2,
              with_moments: bool = False) -> ModelSpec:
    """Small model with one column- and one row-sharded matrix plus a replicated vector per layer."""
    rows, cols = dims
    tensors = []
    for layer in range(num_layers):
        tensors += [
            TensorSpec(f"l{layer}.col", layer, (rows, cols), 0),
            TensorSpec(f"l{layer}.row", layer, (rows, cols), 1),
            TensorSpec(f"l{layer}.norm", layer, (cols,), REPLICATED),
        ]
    model = ModelSpec(num_layers, tuple(tensors), bytes_per_element, name=f"toy-{num_layers}")
    return model.with_optimizer_moments() if with_moments else model
