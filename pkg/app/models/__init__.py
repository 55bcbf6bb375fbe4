from app.models.unet import (
    UNet,
    build_unet,
    forward,
    parameter_count,
    preset,
    self_attention_block,
    timestep_embedding,
    weight_shape_table,
)

__all__ = [
    "UNet",
    "build_unet",
    "forward",
    "parameter_count",
    "preset",
    "self_attention_block",
    "timestep_embedding",
    "weight_shape_table",
]
