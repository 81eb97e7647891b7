#!/usr/bin/env python3
"""Convert a Segment Anything image-encoder checkpoint to the semfield format.

Accepts the original PyTorch checkpoints (keys ``image_encoder.*``) and
Hugging Face ``SamModel`` / ``SamVisionModel`` state dicts (keys
``vision_encoder.*``), either as ``.pth``/``.bin`` or ``.safetensors``.

    python tools/convert_sam_checkpoint.py sam_vit_b_01ec64.pth sam_vit_b.ckpt
"""

import argparse
import json
import re
import struct
import sys

import numpy as np

MAGIC = b"SEMFCKPT"
VERSION = 1
VARIANTS = {768: "vit_b", 1024: "vit_l", 1280: "vit_h"}

HF_RENAMES = [
    (r"^patch_embed\.projection\.", "patch_embed.proj."),
    (r"^layers\.(\d+)\.layer_norm1\.", r"blocks.\1.norm1."),
    (r"^layers\.(\d+)\.layer_norm2\.", r"blocks.\1.norm2."),
    (r"^layers\.(\d+)\.", r"blocks.\1."),
    (r"^neck\.conv1\.", "neck.0."),
    (r"^neck\.layer_norm1\.", "neck.1."),
    (r"^neck\.conv2\.", "neck.2."),
    (r"^neck\.layer_norm2\.", "neck.3."),
]


def load_state_dict(path):
    if path.endswith(".safetensors"):
        from safetensors.numpy import load_file

        return dict(load_file(path))
    import torch

    state = torch.load(path, map_location="cpu", weights_only=True)
    if "model" in state and isinstance(state["model"], dict):
        state = state["model"]
    return {k: v.detach().float().numpy() for k, v in state.items()}


def encoder_tensors(state):
    out = {}
    for key, value in state.items():
        if key.startswith("image_encoder."):
            out[key[len("image_encoder."):]] = value
        elif key.startswith("vision_encoder."):
            name = key[len("vision_encoder."):]
            for pattern, repl in HF_RENAMES:
                name, n = re.subn(pattern, repl, name)
                if n:
                    break
            out[name] = value
    if not out:
        raise SystemExit("no image-encoder tensors found (expected image_encoder.* or vision_encoder.* keys)")
    return out


def to_matrix(name, value):
    value = np.asarray(value, dtype=np.float32)
    if name == "pos_embed":
        return value.reshape(-1, value.shape[-1])
    if value.ndim == 1:
        return value.reshape(1, -1)
    if value.ndim == 4:  # conv kernels: (out, in, kh, kw) -> (out, in*kh*kw)
        return value.reshape(value.shape[0], -1)
    return value


def infer_config(t):
    dim, _, patch, _ = t["patch_embed.proj.weight"].shape
    grid = t["pos_embed"].shape[1]
    depth = len({int(m.group(1)) for k in t if (m := re.match(r"blocks\.(\d+)\.", k))})
    head_dim = t["blocks.0.attn.rel_pos_h"].shape[1]
    global_idx, window = [], 0
    for b in range(depth):
        rows = t[f"blocks.{b}.attn.rel_pos_h"].shape[0]
        if rows == 2 * grid - 1:
            global_idx.append(b)
        else:
            window = (rows + 1) // 2
    return {
        "variant": VARIANTS.get(dim, f"vit_{dim}"),
        "image_size": grid * patch,
        "patch_size": patch,
        "embed_dim": dim,
        "depth": depth,
        "num_heads": dim // head_dim,
        "mlp_dim": t["blocks.0.mlp.lin1.weight"].shape[0],
        "window_size": window,
        "global_attn_indexes": global_idx,
        "out_channels": t["neck.0.weight"].shape[0],
        "layer_norm_eps": 1e-6,
    }


def write_checkpoint(path, header, tensors):
    body = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(body)))
        f.write(body)
        f.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            m = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode()
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BBqq", 0, 0, m.shape[0], m.shape[1]))
            f.write(m.tobytes())


def convert(state, output, variant=None):
    tensors = encoder_tensors(state)
    config = infer_config(tensors)
    if variant:
        config["variant"] = variant
    write_checkpoint(output, {"sam": config}, {k: to_matrix(k, v) for k, v in tensors.items()})
    return config


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("input", help="SAM checkpoint (.pth, .bin or .safetensors)")
    parser.add_argument("output", help="destination .ckpt file")
    parser.add_argument("--variant", help="override the recorded variant name")
    args = parser.parse_args(argv)
    config = convert(load_state_dict(args.input), args.output, args.variant)
    json.dump(config, sys.stdout, indent=2)
    print()


if __name__ == "__main__":
    main()
