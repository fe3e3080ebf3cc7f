"""Layer quantization recipes: plain RTN, clipped RTN, clipped + compensated."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .clipping import ClipGrid, optimize_clipping
from .hessian import gptq_quantize_layer, hessian_from, layerwise_error
from .quantizer import dequantize, quantize_weights
from .tensor import Granularity, QuantizedTensor, QuantScheme, as_array

RECIPES = ("rtn", "lwc", "lwc+gptq")


@dataclass
class LayerResult:
    quantized: QuantizedTensor
    weight_mse_rtn: float
    weight_mse: float
    layer_error: Optional[float] = None


def weight_mse(w: np.ndarray, q: QuantizedTensor) -> float:
    d = w.astype(np.float64) - dequantize(q).data.astype(np.float64)
    return float(np.mean(d * d))


def check_recipe(recipe: str, scheme: QuantScheme) -> None:
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; choose from {', '.join(RECIPES)}")
    if recipe != "rtn" and not (scheme.symmetric and scheme.granularity is Granularity.PER_CHANNEL):
        raise ValueError(f"recipe {recipe} needs a symmetric per-channel scheme")


def quantize_layer(w, recipe: str, scheme: QuantScheme, calib=None,
                   grid: Optional[ClipGrid] = None, reorder: bool = False) -> LayerResult:
    """Quantize one ``(out, in)`` weight. ``calib`` is ``(tokens, in)``.

    The clipping search fixes the per-channel scales first; compensation then
    runs with those scales frozen.
    """
    check_recipe(recipe, scheme)
    w = np.asarray(as_array(w), dtype=np.float32)
    if recipe == "lwc+gptq" and calib is None:
        raise ValueError("recipe lwc+gptq needs calibration activations")
    rtn = quantize_weights(w, scheme)
    if recipe == "rtn":
        q = rtn
    else:
        clip = optimize_clipping(w, scheme.bits, grid)
        clipped = QuantScheme(
            bits=scheme.bits,
            symmetric=True,
            granularity=Granularity.PER_CHANNEL,
            clip_gamma=tuple(float(v) for v in clip.gamma),
            clip_beta=tuple(float(v) for v in clip.beta),
        )
        if recipe == "lwc":
            q = quantize_weights(w, clipped)
        else:
            q = gptq_quantize_layer(w, hessian_from(as_array(calib)), clipped, reorder=reorder)
    err = None if calib is None else layerwise_error(w, q, calib)
    return LayerResult(q, weight_mse(w, rtn), weight_mse(w, q), err)
