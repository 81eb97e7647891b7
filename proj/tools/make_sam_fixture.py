#!/usr/bin/env python3
"""Regenerate tests/fixtures/sam_tiny: a small random SAM image encoder, an
input tensor and the encoder output computed by the transformers reference
implementation, plus a preprocessing case (image.png -> pixels.npy) from the
reference image processor."""

import os
import sys

import numpy as np
import torch
from PIL import Image
from transformers import SamImageProcessor, SamVisionConfig, SamVisionModel

sys.path.insert(0, os.path.dirname(__file__))
from convert_sam_checkpoint import convert  # noqa: E402

OUT = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures", "sam_tiny")


def main():
    torch.manual_seed(0)
    config = SamVisionConfig(hidden_size=32, num_hidden_layers=3, num_attention_heads=4, image_size=64,
                             patch_size=8, window_size=3, global_attn_indexes=[1], output_channels=16, mlp_dim=48)
    model = SamVisionModel(config).eval()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "layer_norm" in name and name.endswith("weight"):
                p.copy_(1.0 + 0.1 * torch.randn_like(p))
            else:
                p.copy_(0.2 * torch.randn_like(p))
        pixels = torch.randn(1, 3, 64, 64)
        out = model(pixel_values=pixels).last_hidden_state  # (1, C, g, g)
    os.makedirs(OUT, exist_ok=True)
    state = {k: v.numpy() for k, v in model.state_dict().items()}
    convert(state, os.path.join(OUT, "encoder.ckpt"), "tiny")
    np.save(os.path.join(OUT, "input.npy"), pixels[0].permute(1, 2, 0).reshape(-1, 3).numpy().astype(np.float32))
    np.save(os.path.join(OUT, "output.npy"), out[0].permute(1, 2, 0).reshape(-1, out.shape[1]).numpy().astype(np.float32))

    # smooth random image so resampling differences stay small
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:30, 0:45]
    image = np.stack([127 + 100 * np.sin(xx / 5.0 + c) * np.cos(yy / 7.0 - c) for c in range(3)], axis=-1)
    image = np.clip(image + rng.normal(0, 10, image.shape), 0, 255).astype(np.uint8)
    Image.fromarray(image).save(os.path.join(OUT, "image.png"))
    processor = SamImageProcessor(size={"longest_edge": 64}, pad_size={"height": 64, "width": 64})
    pixels = processor(images=image, return_tensors="np")["pixel_values"][0]  # (3, 64, 64)
    np.save(os.path.join(OUT, "pixels.npy"), pixels.transpose(1, 2, 0).reshape(-1, 3).astype(np.float32))


if __name__ == "__main__":
    main()
